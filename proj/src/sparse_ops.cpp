#include "cylseg/sparse_ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cylseg {

namespace {

void check_norm(const Matrix& x, const NormView& norm) {
  const std::size_t c = x.cols;
  if (norm.scale.size() != c || norm.shift.size() != c ||
      norm.running_mean.size() != c || norm.running_var.size() != c) {
    throw ShapeError("normalization parameters have " +
                     std::to_string(norm.scale.size()) + " channels, input has " +
                     std::to_string(c));
  }
}

void check_same_sites(const SparseTensor& x, const SparseTensor& y) {
  if (x.coords != y.coords || x.spatial_shape != y.spatial_shape) {
    throw ShapeError("sparse tensors have different coordinate sets");
  }
}

}  // namespace

Matrix batch_norm_forward(const Matrix& x, const NormView& norm, bool training,
                          NormCache* cache) {
  check_norm(x, norm);
  const std::size_t m = x.rows, c = x.cols;
  Matrix y(m, c);
  NormCache local;
  NormCache& nc = cache ? *cache : local;
  nc.training = training;
  nc.normalized = Matrix(m, c);
  nc.inv_std.assign(c, 0.0);
  nc.batch_mean.clear();
  nc.batch_var.clear();

  std::vector<double> mean(c, 0.0), var(c, 0.0);
  if (training) {
    if (m > 0) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t k = 0; k < c; ++k) mean[k] += x(r, k);
      }
      for (std::size_t k = 0; k < c; ++k) mean[k] /= static_cast<double>(m);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t k = 0; k < c; ++k) {
          const double d = x(r, k) - mean[k];
          var[k] += d * d;
        }
      }
      for (std::size_t k = 0; k < c; ++k) var[k] /= static_cast<double>(m);
      nc.batch_mean = mean;
      nc.batch_var = var;
    }
  } else {
    mean.assign(norm.running_mean.begin(), norm.running_mean.end());
    var.assign(norm.running_var.begin(), norm.running_var.end());
  }
  for (std::size_t k = 0; k < c; ++k) nc.inv_std[k] = 1.0 / std::sqrt(var[k] + norm.epsilon);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t k = 0; k < c; ++k) {
      const double xh = (x(r, k) - mean[k]) * nc.inv_std[k];
      nc.normalized(r, k) = xh;
      y(r, k) = norm.scale[k] * xh + norm.shift[k];
    }
  }
  return y;
}

NormGrads batch_norm_backward(const Matrix& grad_out, const NormView& norm,
                              const NormCache& cache) {
  const std::size_t m = grad_out.rows, c = grad_out.cols;
  if (cache.normalized.rows != m || cache.normalized.cols != c) {
    throw ShapeError("gradient does not match the normalization input");
  }
  check_norm(grad_out, norm);
  NormGrads g;
  g.grad_input = Matrix(m, c);
  g.grad_scale.assign(c, 0.0);
  g.grad_shift.assign(c, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t k = 0; k < c; ++k) {
      g.grad_shift[k] += grad_out(r, k);
      g.grad_scale[k] += grad_out(r, k) * cache.normalized(r, k);
    }
  }
  if (!cache.training) {
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t k = 0; k < c; ++k) {
        g.grad_input(r, k) = grad_out(r, k) * norm.scale[k] * cache.inv_std[k];
      }
    }
    return g;
  }
  if (m == 0) return g;
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t k = 0; k < c; ++k) {
      g.grad_input(r, k) =
          norm.scale[k] * cache.inv_std[k] * inv_m *
          (static_cast<double>(m) * grad_out(r, k) - g.grad_shift[k] -
           cache.normalized(r, k) * g.grad_scale[k]);
    }
  }
  return g;
}

void update_running_stats(std::span<double> running_mean, std::span<double> running_var,
                          const NormCache& cache, double momentum) {
  if (!cache.training || cache.batch_mean.empty()) return;
  for (std::size_t k = 0; k < running_mean.size(); ++k) {
    running_mean[k] = momentum * running_mean[k] + (1.0 - momentum) * cache.batch_mean[k];
    running_var[k] = momentum * running_var[k] + (1.0 - momentum) * cache.batch_var[k];
  }
}

SparseTensor batch_norm(const SparseTensor& x, NormParams& norm, bool training) {
  NormCache cache;
  SparseTensor out{x.coords, batch_norm_forward(x.features, view_of(norm), training, &cache),
                   x.spatial_shape};
  if (training) update_running_stats(norm.running_mean, norm.running_var, cache, norm.momentum);
  return out;
}

Matrix leaky_relu(const Matrix& x, double slope) {
  Matrix y = x;
  for (double& v : y.data) v = v >= 0.0 ? v : slope * v;
  return y;
}

Matrix leaky_relu_backward(const Matrix& grad_out, const Matrix& x, double slope) {
  Matrix g = grad_out;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    if (x.data[i] < 0.0) g.data[i] *= slope;
  }
  return g;
}

SparseTensor leaky_relu(const SparseTensor& x, double slope) {
  return {x.coords, leaky_relu(x.features, slope), x.spatial_shape};
}

Matrix sigmoid(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.data) v = 1.0 / (1.0 + std::exp(-v));
  return y;
}

Matrix sigmoid_backward(const Matrix& grad_out, const Matrix& y) {
  Matrix g = grad_out;
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= y.data[i] * (1.0 - y.data[i]);
  return g;
}

SparseTensor add(const SparseTensor& x, const SparseTensor& y) {
  check_same_sites(x, y);
  if (x.channels() != y.channels()) throw ShapeError("channel mismatch in add");
  SparseTensor out = x;
  add_into(out.features, y.features);
  return out;
}

SparseTensor concat_features(const SparseTensor& x, const SparseTensor& y) {
  check_same_sites(x, y);
  return {x.coords, concat_columns(x.features, y.features), x.spatial_shape};
}

Matrix concat_columns(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw ShapeError("row mismatch in concatenation");
  Matrix out(a.rows, a.cols + b.cols);
  for (std::size_t r = 0; r < a.rows; ++r) {
    auto dst = out.row(r);
    std::copy(a.row(r).begin(), a.row(r).end(), dst.begin());
    std::copy(b.row(r).begin(), b.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(a.cols));
  }
  return out;
}

std::pair<Matrix, Matrix> split_columns(const Matrix& m, std::size_t left_cols) {
  if (left_cols > m.cols) throw ShapeError("split point beyond column count");
  Matrix a(m.rows, left_cols), b(m.rows, m.cols - left_cols);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const auto src = m.row(r);
    std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(left_cols), a.row(r).begin());
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(left_cols), src.end(), b.row(r).begin());
  }
  return {std::move(a), std::move(b)};
}

void add_into(Matrix& dst, const Matrix& src) {
  if (dst.rows != src.rows || dst.cols != src.cols) {
    throw ShapeError("matrix shape mismatch in accumulation");
  }
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

Matrix linear_forward(const Matrix& x, std::span<const double> w,
                      std::span<const double> b, std::size_t out) {
  if (w.size() != x.cols * out) throw ShapeError("linear weight size mismatch");
  if (!b.empty() && b.size() != out) throw ShapeError("linear bias size mismatch");
  Matrix y(x.rows, out);
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto dst = y.row(r);
    if (!b.empty()) std::copy(b.begin(), b.end(), dst.begin());
    const auto src = x.row(r);
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double v = src[c];
      const double* wr = w.data() + c * out;
      for (std::size_t o = 0; o < out; ++o) dst[o] += v * wr[o];
    }
  }
  return y;
}

Matrix linear_backward(const Matrix& x, std::span<const double> w,
                       const Matrix& grad_out, std::span<double> grad_w,
                       std::span<double> grad_b) {
  const std::size_t out = grad_out.cols;
  if (grad_out.rows != x.rows || w.size() != x.cols * out || grad_w.size() != w.size()) {
    throw ShapeError("linear gradient shape mismatch");
  }
  Matrix dx(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto go = grad_out.row(r);
    const auto xr = x.row(r);
    auto dxr = dx.row(r);
    for (std::size_t c = 0; c < x.cols; ++c) {
      double* gw = grad_w.data() + c * out;
      const double* wr = w.data() + c * out;
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) {
        gw[o] += xr[c] * go[o];
        acc += wr[o] * go[o];
      }
      dxr[c] = acc;
    }
    if (!grad_b.empty()) {
      for (std::size_t o = 0; o < out; ++o) grad_b[o] += go[o];
    }
  }
  return dx;
}

}  // namespace cylseg
