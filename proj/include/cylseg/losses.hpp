#pragma once

#include <span>
#include <vector>

#include "cylseg/common.hpp"

namespace cylseg {

struct LossWithGrad {
  double loss = 0.0;
  Matrix grad;  // same shape as the differentiated input
};

// sum_i w[t_i] * (-log softmax(z_i)[t_i]) / sum_i w[t_i] over rows whose
// target is not ignore_id. Returns 0 (and a zero gradient) when every row is
// ignored or the weight sum is zero.
LossWithGrad weighted_ce(const Matrix& logits, std::span<const int32_t> targets,
                         std::span<const double> class_weights, int32_t ignore_id);

// Lovász-softmax over classes present in the non-ignored targets. The
// gradient treats the sort as fixed; equal errors keep their original order.
LossWithGrad lovasz_softmax(const Matrix& probs, std::span<const int32_t> targets,
                            int32_t ignore_id);

// Lovász extension of the Jaccard loss for one class, given per-row errors and
// foreground flags. Exposed for testing.
double lovasz_class_loss(std::span<const double> errors, std::span<const uint8_t> foreground,
                         std::vector<double>* grad_errors = nullptr);

Matrix softmax_rows(const Matrix& logits);
// Chain rule through a row-wise softmax: dL/dz given dL/dp and p.
Matrix softmax_backward(const Matrix& grad_probs, const Matrix& probs);

struct LossReport {
  double l_voxel_ce = 0.0;
  double l_voxel_lovasz = 0.0;
  double l_point_ce = 0.0;
  double total = 0.0;
};

struct LossWeights {
  double voxel_ce = 1.0;
  double voxel_lovasz = 1.0;
  double point_ce = 1.0;
};

struct TotalLoss {
  LossReport report;
  Matrix grad_voxel_logits;
  Matrix grad_point_logits;
};

// L = L_voxel + L_point with L_voxel = CE + Lovász on voxel logits and
// L_point = CE on point logits. Report terms are unweighted values;
// total = sum of weighted terms (all weights 1 by default).
TotalLoss total_loss(const Matrix& voxel_logits, std::span<const int32_t> voxel_targets,
                     const Matrix& point_logits, std::span<const int32_t> point_targets,
                     std::span<const double> class_weights, int32_t ignore_id,
                     const LossWeights& weights = {});

// w_c = 1 / sqrt(freq_c + eps) with freq_c the share of non-ignored labels.
std::vector<double> class_weights_from_counts(std::span<const uint64_t> counts,
                                              double eps = 1e-3);

}  // namespace cylseg
