#pragma once

#include <span>
#include <vector>

#include "cylseg/common.hpp"
#include "cylseg/sparse_tensor.hpp"

namespace cylseg {

// Per-channel normalization state. running_* follow
// running = momentum * running + (1 - momentum) * batch.
struct NormParams {
  std::vector<double> scale;
  std::vector<double> shift;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double epsilon = 1e-5;
  double momentum = 0.99;

  explicit NormParams(std::size_t channels = 0)
      : scale(channels, 1.0),
        shift(channels, 0.0),
        running_mean(channels, 0.0),
        running_var(channels, 1.0) {}
};

struct NormView {
  std::span<const double> scale;
  std::span<const double> shift;
  std::span<const double> running_mean;
  std::span<const double> running_var;
  double epsilon = 1e-5;
};

inline NormView view_of(const NormParams& p) {
  return {p.scale, p.shift, p.running_mean, p.running_var, p.epsilon};
}

// Values kept from the forward pass for the backward pass.
struct NormCache {
  bool training = false;
  Matrix normalized;                // x_hat
  std::vector<double> inv_std;
  std::vector<double> batch_mean;   // training only
  std::vector<double> batch_var;    // biased, training only
};

// Training mode normalizes with statistics over the rows of x; inference mode
// uses the running statistics.
Matrix batch_norm_forward(const Matrix& x, const NormView& norm, bool training,
                          NormCache* cache = nullptr);

struct NormGrads {
  Matrix grad_input;
  std::vector<double> grad_scale;
  std::vector<double> grad_shift;
};

NormGrads batch_norm_backward(const Matrix& grad_out, const NormView& norm,
                              const NormCache& cache);

// Applies the batch statistics recorded in `cache` to the running averages.
void update_running_stats(std::span<double> running_mean, std::span<double> running_var,
                          const NormCache& cache, double momentum);

SparseTensor batch_norm(const SparseTensor& x, NormParams& norm, bool training);

Matrix leaky_relu(const Matrix& x, double slope);
// dx given the forward input x.
Matrix leaky_relu_backward(const Matrix& grad_out, const Matrix& x, double slope);
SparseTensor leaky_relu(const SparseTensor& x, double slope);

Matrix sigmoid(const Matrix& x);
// dx given the forward output y.
Matrix sigmoid_backward(const Matrix& grad_out, const Matrix& y);

// Elementwise sum; the coordinate lists must be identical.
SparseTensor add(const SparseTensor& x, const SparseTensor& y);
// Channel concatenation [x | y]; the coordinate lists must be identical.
SparseTensor concat_features(const SparseTensor& x, const SparseTensor& y);

Matrix concat_columns(const Matrix& a, const Matrix& b);
// Splits columns [0, left_cols) and [left_cols, cols).
std::pair<Matrix, Matrix> split_columns(const Matrix& m, std::size_t left_cols);

void add_into(Matrix& dst, const Matrix& src);

// Row-wise affine map y = x W + b with W laid out [in][out]; b may be empty.
Matrix linear_forward(const Matrix& x, std::span<const double> w,
                      std::span<const double> b, std::size_t out);
// Accumulates into grad_w / grad_b (grad_b may be empty) and returns dx.
Matrix linear_backward(const Matrix& x, std::span<const double> w,
                       const Matrix& grad_out, std::span<double> grad_w,
                       std::span<double> grad_b);

}  // namespace cylseg
