#pragma once

#include <span>
#include <vector>

#include "cylseg/common.hpp"

namespace cylseg {

// Active sites of a 3D grid and their feature rows.
struct SparseTensor {
  std::vector<Coord3> coords;
  Matrix features;  // coords.size() x channels
  Shape3 spatial_shape{0, 0, 0};

  std::size_t size() const { return coords.size(); }
  std::size_t channels() const { return features.cols; }

  // Unique, in-bounds coordinates and a matching feature row count.
  void validate() const;
};

enum class ConvMode { submanifold, strided, inverse };

struct KernelSpec {
  Shape3 size{3, 3, 3};
  Shape3 stride{1, 1, 1};
  ConvMode mode = ConvMode::submanifold;

  int volume() const { return size[0] * size[1] * size[2]; }
  // Offset of kernel index k; offsets are centered, ±(size-1)/2 per axis, and
  // enumerated with the last axis fastest.
  Coord3 offset(int k) const;
  void validate() const;

  static KernelSpec submanifold(Shape3 size) { return {size, {1, 1, 1}, ConvMode::submanifold}; }
  static KernelSpec strided(Shape3 size, Shape3 stride) {
    return {size, stride, ConvMode::strided};
  }
};

struct RulePair {
  int32_t in;
  int32_t out;
  bool operator==(const RulePair&) const = default;
};

// Per kernel offset k, the (input site, output site) pairs with
// in_coords[in] == out_coords[out] * stride + offset(k). Every list is sorted
// by (out, in).
struct Rulebook {
  KernelSpec kernel;
  std::vector<Coord3> in_coords;
  Shape3 in_shape{0, 0, 0};
  std::vector<Coord3> out_coords;
  Shape3 out_shape{0, 0, 0};
  std::vector<std::vector<RulePair>> pairs;

  std::size_t num_pairs() const;
};

// Submanifold: outputs are the input sites. Strided: an output site exists
// wherever its receptive field holds an input site; out_shape = ceil(in/stride).
// Strided output sites are sorted by flat index.
Rulebook build_rulebook(std::span<const Coord3> in_coords, Shape3 in_shape,
                        const KernelSpec& kernel);

// The transposed connectivity of a strided rulebook: its outputs are the
// forward input sites and each pair is reversed. Mode becomes inverse.
Rulebook transpose_rulebook(const Rulebook& forward);

// Non-owning view of convolution parameters. weights is laid out
// [kernel_volume][in_channels][out_channels]; bias may be empty.
struct ConvWeightsView {
  int kernel_volume = 0;
  int in_channels = 0;
  int out_channels = 0;
  std::span<const double> weights;
  std::span<const double> bias;

  double w(int k, int c, int o) const {
    return weights[(static_cast<std::size_t>(k) * in_channels + c) * out_channels + o];
  }
};

struct ConvParams {
  int kernel_volume = 0;
  int in_channels = 0;
  int out_channels = 0;
  std::vector<double> weights;
  std::vector<double> bias;

  ConvParams() = default;
  ConvParams(int kvol, int cin, int cout, bool with_bias = true)
      : kernel_volume(kvol),
        in_channels(cin),
        out_channels(cout),
        weights(static_cast<std::size_t>(kvol) * cin * cout, 0.0),
        bias(with_bias ? cout : 0, 0.0) {}

  ConvWeightsView view() const {
    return {kernel_volume, in_channels, out_channels, weights, bias};
  }
  std::size_t num_weights() const { return weights.size(); }
};

struct ConvGrads {
  Matrix grad_input;
  std::vector<double> grad_weights;
  std::vector<double> grad_bias;
};

// out[j] = bias + sum_k sum_{(i->j) in pairs[k]} weights[k]^T x[i].
// Accumulation per output site runs in (offset, pair) order for every thread
// count, so results are bitwise reproducible.
SparseTensor sparse_conv_forward(const SparseTensor& x, const ConvWeightsView& params,
                                 const Rulebook& rulebook);

// Exact adjoint of sparse_conv_forward.
ConvGrads sparse_conv_backward(const SparseTensor& x, const ConvWeightsView& params,
                               const Rulebook& rulebook, const Matrix& grad_out);

// Upsampling with the transpose of a stored strided rulebook: output sites are
// the stored rulebook's input sites.
SparseTensor inverse_conv(const SparseTensor& x, const ConvWeightsView& params,
                          const Rulebook& stored_forward);
ConvGrads inverse_conv_backward(const SparseTensor& x, const ConvWeightsView& params,
                                const Rulebook& stored_forward, const Matrix& grad_out);

// Each offset's C_in x C_out block is uniform in ±sqrt(6 / (C_in + C_out)).
void init_conv_weights(std::span<double> weights, int kernel_volume, int in_channels,
                       int out_channels, uint64_t seed);

}  // namespace cylseg
