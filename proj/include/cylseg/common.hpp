#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cylseg {

using Coord3 = std::array<int32_t, 3>;
using Shape3 = std::array<int32_t, 3>;

// Error categories. The CLI maps ConfigError to exit code 2 and everything
// else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dense row-major matrix of doubles. Used for per-site / per-point features.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  bool operator==(const Matrix&) const = default;
};

// N-dimensional tensor with a name-independent shape; the unit of parameter
// storage and checkpoint serialization.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0);

  std::size_t size() const { return values.size(); }
  bool operator==(const Tensor&) const = default;
};

// Ordered so that every iteration over parameters is deterministic.
using TensorMap = std::map<std::string, Tensor>;

// Zero tensors with the same names and shapes as `like`.
TensorMap zeros_like(const TensorMap& like);

// Worker-thread count used by the convolution kernels. Results never depend
// on this value.
void set_num_threads(int n);
int num_threads();

// Runs fn(begin, end) over contiguous chunks of [0, n). Chunks are executed
// on up to num_threads() threads; callers must only write disjoint outputs.
void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t min_chunk = 64);

inline int64_t flat_index(const Coord3& c, const Shape3& s) {
  return (static_cast<int64_t>(c[0]) * s[1] + c[1]) * s[2] + c[2];
}

inline int64_t volume(const Shape3& s) {
  return static_cast<int64_t>(s[0]) * s[1] * s[2];
}

}  // namespace cylseg
