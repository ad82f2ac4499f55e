#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "cylseg/gradcheck.hpp"
#include "cylseg/pointcloud.hpp"
#include "cylseg/sparse_tensor.hpp"

namespace cylseg {

// Random sparse tensor: each site of `shape` is active with probability
// `density` (at least one site is always active).
SparseTensor random_sparse_tensor(Shape3 shape, int channels, double density, uint64_t seed);

// Kernels used by the network (plus 3x3x3 and 1x1x1 submanifold).
std::vector<KernelSpec> network_kernel_specs();

struct ConvOracleStats {
  int instances = 0;
  int failures = 0;
  double max_abs_error = 0.0;
  bool pass(double tolerance) const { return failures == 0 && max_abs_error < tolerance; }
};

// Sparse convolution (all network kernels) and inverse convolution against
// the dense reference: values, output coordinate sets and the adjoint
// identity <conv(x), g> = <x, conv^T(g)>.
ConvOracleStats conv_oracle_suite(int instances, uint64_t seed, double tolerance = 1e-10);

struct NamedFdReport {
  std::string name;
  FdReport report;
};

struct GradientSuiteStats {
  std::vector<NamedFdReport> isolated;  // single ops and single blocks
  NamedFdReport end_to_end;             // full toy network with the total loss
  double max_isolated_error() const;
  bool pass(double isolated_tolerance, double end_to_end_tolerance) const;
};

// Runs every differentiable operation and block through finite differences.
GradientSuiteStats gradient_suite(uint64_t seed);

// Lovász-softmax evaluated from its definition: for each present class the
// Lovász extension of the Jaccard set loss, integrated over the level sets of
// the error vector; classes averaged.
double lovasz_softmax_bruteforce(const Matrix& probs, std::span<const int32_t> targets,
                                 int32_t ignore_id);

struct LovaszSuiteStats {
  int instances = 0;
  double max_abs_error = 0.0;
  bool perfect_is_zero = true;
};
LovaszSuiteStats lovasz_suite(int instances, uint64_t seed);

// Prints one line per suite; returns true when every suite passes.
bool run_selftest(std::ostream& out, uint64_t seed = 0);

}  // namespace cylseg
