#include "cylseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace cylseg {

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows, logits.cols);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto z = logits.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      p(r, k) = std::exp(z[k] - mx);
      sum += p(r, k);
    }
    for (std::size_t k = 0; k < z.size(); ++k) p(r, k) /= sum;
  }
  return p;
}

Matrix softmax_backward(const Matrix& grad_probs, const Matrix& probs) {
  Matrix g(probs.rows, probs.cols);
  for (std::size_t r = 0; r < probs.rows; ++r) {
    double dot = 0.0;
    for (std::size_t k = 0; k < probs.cols; ++k) dot += grad_probs(r, k) * probs(r, k);
    for (std::size_t k = 0; k < probs.cols; ++k) {
      g(r, k) = probs(r, k) * (grad_probs(r, k) - dot);
    }
  }
  return g;
}

namespace {

void check_targets(const Matrix& m, std::span<const int32_t> targets, int32_t ignore_id) {
  if (targets.size() != m.rows) {
    throw ShapeError("target count " + std::to_string(targets.size()) + " != rows " +
                     std::to_string(m.rows));
  }
  for (int32_t t : targets) {
    if (t != ignore_id && (t < 0 || static_cast<std::size_t>(t) >= m.cols)) {
      throw ShapeError("target id out of range: " + std::to_string(t));
    }
  }
}

}  // namespace

LossWithGrad weighted_ce(const Matrix& logits, std::span<const int32_t> targets,
                         std::span<const double> class_weights, int32_t ignore_id) {
  check_targets(logits, targets, ignore_id);
  if (class_weights.size() != logits.cols) {
    throw ShapeError("class weight count does not match logit columns");
  }
  LossWithGrad out{0.0, Matrix(logits.rows, logits.cols)};
  double weight_sum = 0.0;
  for (int32_t t : targets) {
    if (t != ignore_id) weight_sum += class_weights[t];
  }
  if (weight_sum <= 0.0) return out;
  const Matrix p = softmax_rows(logits);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const int32_t t = targets[r];
    if (t == ignore_id) continue;
    const auto z = logits.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double nll = std::log(sum) + mx - z[t];
    const double scale = class_weights[t] / weight_sum;
    out.loss += scale * nll;
    for (std::size_t k = 0; k < logits.cols; ++k) {
      out.grad(r, k) = scale * (p(r, k) - (static_cast<int32_t>(k) == t ? 1.0 : 0.0));
    }
  }
  return out;
}

double lovasz_class_loss(std::span<const double> errors, std::span<const uint8_t> foreground,
                         std::vector<double>* grad_errors) {
  const std::size_t m = errors.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });
  double gts = 0.0;
  for (uint8_t f : foreground) gts += f;
  if (grad_errors) grad_errors->assign(m, 0.0);
  double loss = 0.0;
  double cum_fg = 0.0, cum_bg = 0.0, prev_jaccard = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t i = order[j];
    cum_fg += foreground[i];
    cum_bg += 1.0 - foreground[i];
    const double intersection = gts - cum_fg;
    const double uni = gts + cum_bg;
    const double jaccard = 1.0 - intersection / uni;
    const double g = jaccard - prev_jaccard;
    prev_jaccard = jaccard;
    loss += errors[i] * g;
    if (grad_errors) (*grad_errors)[i] = g;
  }
  return loss;
}

LossWithGrad lovasz_softmax(const Matrix& probs, std::span<const int32_t> targets,
                            int32_t ignore_id) {
  check_targets(probs, targets, ignore_id);
  LossWithGrad out{0.0, Matrix(probs.rows, probs.cols)};
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < probs.rows; ++r) {
    if (targets[r] != ignore_id) rows.push_back(r);
  }
  if (rows.empty()) return out;

  std::vector<int> present;
  for (std::size_t c = 0; c < probs.cols; ++c) {
    for (std::size_t r : rows) {
      if (targets[r] == static_cast<int32_t>(c)) {
        present.push_back(static_cast<int>(c));
        break;
      }
    }
  }
  std::vector<double> errors(rows.size()), grad;
  std::vector<uint8_t> fg(rows.size());
  for (int c : present) {
    for (std::size_t e = 0; e < rows.size(); ++e) {
      fg[e] = targets[rows[e]] == c ? 1 : 0;
      errors[e] = std::abs(fg[e] - probs(rows[e], c));
    }
    out.loss += lovasz_class_loss(errors, fg, &grad);
    for (std::size_t e = 0; e < rows.size(); ++e) {
      // d|fg - p| / dp; at p == fg the error is zero and its grad weight
      // multiplies a zero-measure kink, take the fg side.
      const double sign = fg[e] ? -1.0 : 1.0;
      out.grad(rows[e], c) += grad[e] * sign;
    }
  }
  const double inv = 1.0 / static_cast<double>(present.size());
  out.loss *= inv;
  for (double& g : out.grad.data) g *= inv;
  return out;
}

TotalLoss total_loss(const Matrix& voxel_logits, std::span<const int32_t> voxel_targets,
                     const Matrix& point_logits, std::span<const int32_t> point_targets,
                     std::span<const double> class_weights, int32_t ignore_id,
                     const LossWeights& weights) {
  TotalLoss out;
  const auto vce = weighted_ce(voxel_logits, voxel_targets, class_weights, ignore_id);
  const Matrix probs = softmax_rows(voxel_logits);
  const auto lov = lovasz_softmax(probs, voxel_targets, ignore_id);
  const auto pce = weighted_ce(point_logits, point_targets, class_weights, ignore_id);

  out.report.l_voxel_ce = vce.loss;
  out.report.l_voxel_lovasz = lov.loss;
  out.report.l_point_ce = pce.loss;
  out.report.total = weights.voxel_ce * vce.loss + weights.voxel_lovasz * lov.loss +
                     weights.point_ce * pce.loss;

  out.grad_voxel_logits = softmax_backward(lov.grad, probs);
  for (double& g : out.grad_voxel_logits.data) g *= weights.voxel_lovasz;
  for (std::size_t i = 0; i < vce.grad.data.size(); ++i) {
    out.grad_voxel_logits.data[i] += weights.voxel_ce * vce.grad.data[i];
  }
  out.grad_point_logits = pce.grad;
  for (double& g : out.grad_point_logits.data) g *= weights.point_ce;
  return out;
}

std::vector<double> class_weights_from_counts(std::span<const uint64_t> counts, double eps) {
  const double total = static_cast<double>(
      std::accumulate(counts.begin(), counts.end(), uint64_t{0}));
  std::vector<double> w(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double freq = total > 0.0 ? static_cast<double>(counts[c]) / total : 0.0;
    w[c] = 1.0 / std::sqrt(freq + eps);
  }
  return w;
}

}  // namespace cylseg
