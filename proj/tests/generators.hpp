#pragma once

// Small hand-rolled generators for property tests. Every generator is a pure
// function of its Rng, so failures reproduce from the printed seed.

#include <cstdint>
#include <vector>

#include "cylseg/common.hpp"
#include "cylseg/pointcloud.hpp"
#include "cylseg/random.hpp"

namespace cylseg::testing {

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = scale * rng.normal();
  return m;
}

inline PointCloud random_cloud(Rng& rng, int n, double extent, double z_lo, double z_hi,
                               int num_classes = 0) {
  PointCloud c;
  for (int i = 0; i < n; ++i) {
    c.xyz.push_back({rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                     rng.uniform(z_lo, z_hi)});
    c.intensity.push_back(rng.uniform());
  }
  if (num_classes > 0) {
    std::vector<int32_t> labels(n);
    for (auto& l : labels) l = static_cast<int32_t>(rng.below(num_classes));
    c.labels = labels;
  }
  return c;
}

inline std::vector<std::size_t> random_permutation(Rng& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

}  // namespace cylseg::testing
