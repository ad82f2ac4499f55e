#include "cylseg/sparse_tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "cylseg/random.hpp"

namespace cylseg {

namespace {

std::string coord_str(const Coord3& c) {
  return "(" + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," +
         std::to_string(c[2]) + ")";
}

bool in_bounds(const Coord3& c, const Shape3& s) {
  return c[0] >= 0 && c[1] >= 0 && c[2] >= 0 && c[0] < s[0] && c[1] < s[1] &&
         c[2] < s[2];
}

std::unordered_map<int64_t, int32_t> index_sites(std::span<const Coord3> coords,
                                                 const Shape3& shape) {
  std::unordered_map<int64_t, int32_t> table;
  table.reserve(coords.size() * 2);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    table.emplace(flat_index(coords[i], shape), static_cast<int32_t>(i));
  }
  return table;
}

// CSR view of a rulebook grouped by one side of each pair, entries in
// (offset, pair) order.
struct Grouped {
  std::vector<std::size_t> start;
  std::vector<int32_t> offset;
  std::vector<int32_t> other;
};

Grouped group_pairs(const Rulebook& rb, std::size_t num_groups, bool by_output) {
  Grouped g;
  g.start.assign(num_groups + 1, 0);
  for (const auto& list : rb.pairs) {
    for (const auto& p : list) ++g.start[(by_output ? p.out : p.in) + 1];
  }
  for (std::size_t i = 0; i < num_groups; ++i) g.start[i + 1] += g.start[i];
  g.offset.resize(g.start.back());
  g.other.resize(g.start.back());
  std::vector<std::size_t> fill(g.start.begin(), g.start.end() - 1);
  for (std::size_t k = 0; k < rb.pairs.size(); ++k) {
    for (const auto& p : rb.pairs[k]) {
      const int32_t key = by_output ? p.out : p.in;
      const std::size_t slot = fill[key]++;
      g.offset[slot] = static_cast<int32_t>(k);
      g.other[slot] = by_output ? p.in : p.out;
    }
  }
  return g;
}

void check_conv_shapes(const SparseTensor& x, const ConvWeightsView& params,
                       const Rulebook& rb) {
  if (static_cast<int>(rb.pairs.size()) != params.kernel_volume) {
    throw ShapeError("rulebook kernel volume " + std::to_string(rb.pairs.size()) +
                     " != weight kernel volume " +
                     std::to_string(params.kernel_volume));
  }
  if (static_cast<int>(x.channels()) != params.in_channels) {
    throw ShapeError("input has " + std::to_string(x.channels()) +
                     " channels, weights expect " +
                     std::to_string(params.in_channels));
  }
  if (params.weights.size() != static_cast<std::size_t>(params.kernel_volume) *
                                   params.in_channels * params.out_channels) {
    throw ShapeError("weight buffer size does not match its dimensions");
  }
  if (!params.bias.empty() &&
      params.bias.size() != static_cast<std::size_t>(params.out_channels)) {
    throw ShapeError("bias length does not match output channels");
  }
  if (x.coords != rb.in_coords) {
    throw ShapeError("input coordinates do not match the rulebook");
  }
}

}  // namespace

void SparseTensor::validate() const {
  if (features.rows != coords.size()) {
    throw ShapeError("feature rows " + std::to_string(features.rows) +
                     " != site count " + std::to_string(coords.size()));
  }
  std::unordered_set<int64_t> seen;
  seen.reserve(coords.size() * 2);
  for (const auto& c : coords) {
    if (!in_bounds(c, spatial_shape)) {
      throw ShapeError("coordinate out of bounds " + coord_str(c));
    }
    if (!seen.insert(flat_index(c, spatial_shape)).second) {
      throw ShapeError("duplicate coordinate " + coord_str(c));
    }
  }
}

Coord3 KernelSpec::offset(int k) const {
  const int c = k % size[2];
  const int b = (k / size[2]) % size[1];
  const int a = k / (size[2] * size[1]);
  return {a - (size[0] - 1) / 2, b - (size[1] - 1) / 2, c - (size[2] - 1) / 2};
}

void KernelSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (size[a] < 1 || size[a] % 2 == 0) {
      throw ShapeError("kernel sizes must be odd and positive");
    }
    if (stride[a] < 1 || stride[a] > 2) throw ShapeError("stride must be 1 or 2");
  }
  if (mode == ConvMode::submanifold && stride != Shape3{1, 1, 1}) {
    throw ShapeError("submanifold convolution requires unit stride");
  }
}

std::size_t Rulebook::num_pairs() const {
  std::size_t n = 0;
  for (const auto& l : pairs) n += l.size();
  return n;
}

Rulebook build_rulebook(std::span<const Coord3> in_coords, Shape3 in_shape,
                        const KernelSpec& kernel) {
  kernel.validate();
  if (kernel.mode == ConvMode::inverse) {
    throw ShapeError("inverse rulebooks come from transpose_rulebook");
  }
  Rulebook rb;
  rb.kernel = kernel;
  rb.in_coords.assign(in_coords.begin(), in_coords.end());
  rb.in_shape = in_shape;
  rb.pairs.resize(kernel.volume());
  const auto sites = index_sites(in_coords, in_shape);
  const int kvol = kernel.volume();

  if (kernel.mode == ConvMode::submanifold) {
    rb.out_coords = rb.in_coords;
    rb.out_shape = in_shape;
  } else {
    for (int a = 0; a < 3; ++a) {
      rb.out_shape[a] = (in_shape[a] + kernel.stride[a] - 1) / kernel.stride[a];
    }
    std::vector<int64_t> candidates;
    for (const auto& c : in_coords) {
      for (int k = 0; k < kvol; ++k) {
        const Coord3 off = kernel.offset(k);
        Coord3 o{};
        bool ok = true;
        for (int a = 0; a < 3 && ok; ++a) {
          const int d = c[a] - off[a];
          ok = d >= 0 && d % kernel.stride[a] == 0;
          o[a] = d / kernel.stride[a];
        }
        if (ok && in_bounds(o, rb.out_shape)) {
          candidates.push_back(flat_index(o, rb.out_shape));
        }
      }
    }
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()),
                     candidates.end());
    rb.out_coords.reserve(candidates.size());
    for (int64_t f : candidates) {
      const int32_t l = static_cast<int32_t>(f % rb.out_shape[2]);
      const int32_t w = static_cast<int32_t>((f / rb.out_shape[2]) % rb.out_shape[1]);
      const int32_t h = static_cast<int32_t>(f / (static_cast<int64_t>(rb.out_shape[2]) *
                                                  rb.out_shape[1]));
      rb.out_coords.push_back({h, w, l});
    }
  }

  for (std::size_t j = 0; j < rb.out_coords.size(); ++j) {
    const Coord3& o = rb.out_coords[j];
    for (int k = 0; k < kvol; ++k) {
      const Coord3 off = kernel.offset(k);
      const Coord3 p{o[0] * kernel.stride[0] + off[0], o[1] * kernel.stride[1] + off[1],
                     o[2] * kernel.stride[2] + off[2]};
      if (!in_bounds(p, in_shape)) continue;
      if (auto it = sites.find(flat_index(p, in_shape)); it != sites.end()) {
        rb.pairs[k].push_back({it->second, static_cast<int32_t>(j)});
      }
    }
  }
  return rb;
}

Rulebook transpose_rulebook(const Rulebook& forward) {
  Rulebook rb;
  rb.kernel = forward.kernel;
  rb.kernel.mode = ConvMode::inverse;
  rb.in_coords = forward.out_coords;
  rb.in_shape = forward.out_shape;
  rb.out_coords = forward.in_coords;
  rb.out_shape = forward.in_shape;
  rb.pairs.resize(forward.pairs.size());
  for (std::size_t k = 0; k < forward.pairs.size(); ++k) {
    auto& list = rb.pairs[k];
    list.reserve(forward.pairs[k].size());
    for (const auto& p : forward.pairs[k]) list.push_back({p.out, p.in});
    std::sort(list.begin(), list.end(), [](const RulePair& a, const RulePair& b) {
      return a.out != b.out ? a.out < b.out : a.in < b.in;
    });
  }
  return rb;
}

SparseTensor sparse_conv_forward(const SparseTensor& x, const ConvWeightsView& params,
                                 const Rulebook& rulebook) {
  check_conv_shapes(x, params, rulebook);
  const int cin = params.in_channels;
  const int cout = params.out_channels;
  SparseTensor out;
  out.coords = rulebook.out_coords;
  out.spatial_shape = rulebook.out_shape;
  out.features = Matrix(out.coords.size(), cout);
  const Grouped by_out = group_pairs(rulebook, out.coords.size(), true);

  parallel_for(out.coords.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      auto dst = out.features.row(j);
      if (!params.bias.empty()) std::copy(params.bias.begin(), params.bias.end(), dst.begin());
      for (std::size_t e = by_out.start[j]; e < by_out.start[j + 1]; ++e) {
        const auto src = x.features.row(by_out.other[e]);
        const double* w = params.weights.data() +
                          static_cast<std::size_t>(by_out.offset[e]) * cin * cout;
        for (int c = 0; c < cin; ++c) {
          const double v = src[c];
          const double* wr = w + static_cast<std::size_t>(c) * cout;
          for (int o = 0; o < cout; ++o) dst[o] += v * wr[o];
        }
      }
    }
  });
  return out;
}

ConvGrads sparse_conv_backward(const SparseTensor& x, const ConvWeightsView& params,
                               const Rulebook& rulebook, const Matrix& grad_out) {
  check_conv_shapes(x, params, rulebook);
  const int cin = params.in_channels;
  const int cout = params.out_channels;
  if (grad_out.rows != rulebook.out_coords.size() ||
      grad_out.cols != static_cast<std::size_t>(cout)) {
    throw ShapeError("gradient is not aligned with the convolution output");
  }
  ConvGrads g;
  g.grad_input = Matrix(x.size(), cin);
  g.grad_weights.assign(params.weights.size(), 0.0);
  if (!params.bias.empty()) {
    g.grad_bias.assign(cout, 0.0);
    for (std::size_t j = 0; j < grad_out.rows; ++j) {
      for (int o = 0; o < cout; ++o) g.grad_bias[o] += grad_out(j, o);
    }
  }

  // dW[k] = sum over pairs of x[in]^T g[out]; offsets are independent.
  parallel_for(rulebook.pairs.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      double* gw = g.grad_weights.data() + k * cin * cout;
      for (const auto& p : rulebook.pairs[k]) {
        const auto xi = x.features.row(p.in);
        const auto go = grad_out.row(p.out);
        for (int c = 0; c < cin; ++c) {
          double* row = gw + static_cast<std::size_t>(c) * cout;
          for (int o = 0; o < cout; ++o) row[o] += xi[c] * go[o];
        }
      }
    }
  }, 1);

  const Grouped by_in = group_pairs(rulebook, x.size(), false);
  parallel_for(x.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto dst = g.grad_input.row(i);
      for (std::size_t e = by_in.start[i]; e < by_in.start[i + 1]; ++e) {
        const auto go = grad_out.row(by_in.other[e]);
        const double* w = params.weights.data() +
                          static_cast<std::size_t>(by_in.offset[e]) * cin * cout;
        for (int c = 0; c < cin; ++c) {
          const double* wr = w + static_cast<std::size_t>(c) * cout;
          double acc = 0.0;
          for (int o = 0; o < cout; ++o) acc += wr[o] * go[o];
          dst[c] += acc;
        }
      }
    }
  });
  return g;
}

namespace {

void check_stored(const SparseTensor& x, const Rulebook& stored) {
  if (stored.kernel.mode != ConvMode::strided) {
    throw ShapeError("inverse convolution needs a stored strided rulebook");
  }
  if (x.coords != stored.out_coords || x.spatial_shape != stored.out_shape) {
    throw ShapeError("input does not match the stored downsample output");
  }
}

}  // namespace

SparseTensor inverse_conv(const SparseTensor& x, const ConvWeightsView& params,
                          const Rulebook& stored_forward) {
  check_stored(x, stored_forward);
  return sparse_conv_forward(x, params, transpose_rulebook(stored_forward));
}

ConvGrads inverse_conv_backward(const SparseTensor& x, const ConvWeightsView& params,
                                const Rulebook& stored_forward, const Matrix& grad_out) {
  check_stored(x, stored_forward);
  return sparse_conv_backward(x, params, transpose_rulebook(stored_forward), grad_out);
}

void init_conv_weights(std::span<double> weights, int kernel_volume, int in_channels,
                       int out_channels, uint64_t seed) {
  if (weights.size() !=
      static_cast<std::size_t>(kernel_volume) * in_channels * out_channels) {
    throw ShapeError("weight buffer size does not match its dimensions");
  }
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / (in_channels + out_channels));
  for (double& w : weights) w = rng.uniform(-bound, bound);
}

}  // namespace cylseg
