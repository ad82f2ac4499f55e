#pragma once

#include <vector>

#include "cylseg/common.hpp"
#include "cylseg/sparse_tensor.hpp"

namespace cylseg {

// H x W x L x C dense grid plus an activity mask. Direct loop code, used as
// the reference for the sparse kernels.
struct DenseGrid {
  Shape3 shape{0, 0, 0};
  int channels = 0;
  std::vector<double> values;    // ((h * W + w) * L + l) * C + c
  std::vector<uint8_t> active;   // (h * W + w) * L + l

  DenseGrid() = default;
  DenseGrid(Shape3 s, int c)
      : shape(s),
        channels(c),
        values(static_cast<std::size_t>(volume(s)) * c, 0.0),
        active(static_cast<std::size_t>(volume(s)), 0) {}

  double& at(const Coord3& p, int c) {
    return values[static_cast<std::size_t>(flat_index(p, shape)) * channels + c];
  }
  double at(const Coord3& p, int c) const {
    return values[static_cast<std::size_t>(flat_index(p, shape)) * channels + c];
  }
  bool is_active(const Coord3& p) const { return active[flat_index(p, shape)] != 0; }
};

DenseGrid densify(const SparseTensor& x);
// Active sites of the grid, in flat-index order.
SparseTensor sparsify(const DenseGrid& grid);

// Cross-correlation out[p] = bias + sum_k W[k]^T in[p * stride + offset(k)],
// zero outside the grid. Submanifold mode keeps only the input-active sites;
// strided mode evaluates every output position, marking as active those whose
// receptive field touches an active input.
DenseGrid dense_conv_oracle(const DenseGrid& in, const ConvWeightsView& w,
                            const KernelSpec& kernel);

// Transposed convolution onto a fine grid of shape fine_shape:
// out[p] = bias + sum over (k, q) with q * stride + offset(k) = p of W[k]^T in[q].
DenseGrid dense_transposed_conv_oracle(const DenseGrid& in, const ConvWeightsView& w,
                                       const KernelSpec& kernel, Shape3 fine_shape);

}  // namespace cylseg
