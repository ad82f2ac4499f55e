#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "cylseg/common.hpp"

namespace cylseg {

struct FdOptions {
  double tolerance = 1e-6;
  // Blocks with at most this many entries are checked coordinate-wise; larger
  // blocks are checked along `directions` random unit directions
  // (Jacobian-vector products).
  std::size_t max_coordinates = 64;
  int directions = 4;
  uint64_t seed = 0;
  // Denominator floor so blocks whose gradient is exactly zero do not divide
  // by zero.
  double abs_floor = 1e-12;
};

struct FdBlockReport {
  std::string name;
  std::size_t checks = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;  // max |analytic - numeric| / scale of the block
  bool finite = true;
  bool pass = false;
};

struct FdReport {
  std::vector<FdBlockReport> blocks;
  bool pass() const;
  double max_rel_error() const;
  void print(std::ostream& out) const;
};

// Central differences of a scalar function against its analytic gradient.
// The step for an entry v is cbrt(machine epsilon) * (|v| + 1). For direction
// checks the step is cbrt(eps) * (max|v| + 1) along the unit direction.
FdReport finite_diff_check(const std::function<double(const TensorMap&)>& fn,
                           const TensorMap& point, const TensorMap& analytic,
                           const FdOptions& options = {});

}  // namespace cylseg
