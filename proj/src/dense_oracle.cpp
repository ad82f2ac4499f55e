#include "cylseg/dense_oracle.hpp"

namespace cylseg {

DenseGrid densify(const SparseTensor& x) {
  DenseGrid g(x.spatial_shape, static_cast<int>(x.channels()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    g.active[flat_index(x.coords[i], g.shape)] = 1;
    for (int c = 0; c < g.channels; ++c) g.at(x.coords[i], c) = x.features(i, c);
  }
  return g;
}

SparseTensor sparsify(const DenseGrid& grid) {
  SparseTensor t;
  t.spatial_shape = grid.shape;
  for (int h = 0; h < grid.shape[0]; ++h) {
    for (int w = 0; w < grid.shape[1]; ++w) {
      for (int l = 0; l < grid.shape[2]; ++l) {
        if (grid.is_active({h, w, l})) t.coords.push_back({h, w, l});
      }
    }
  }
  t.features = Matrix(t.coords.size(), grid.channels);
  for (std::size_t i = 0; i < t.coords.size(); ++i) {
    for (int c = 0; c < grid.channels; ++c) t.features(i, c) = grid.at(t.coords[i], c);
  }
  return t;
}

namespace {

bool inside(const Coord3& p, const Shape3& s) {
  return p[0] >= 0 && p[1] >= 0 && p[2] >= 0 && p[0] < s[0] && p[1] < s[1] && p[2] < s[2];
}

}  // namespace

DenseGrid dense_conv_oracle(const DenseGrid& in, const ConvWeightsView& w,
                            const KernelSpec& kernel) {
  Shape3 out_shape = in.shape;
  if (kernel.mode != ConvMode::submanifold) {
    for (int a = 0; a < 3; ++a) {
      out_shape[a] = (in.shape[a] + kernel.stride[a] - 1) / kernel.stride[a];
    }
  }
  DenseGrid out(out_shape, w.out_channels);
  for (int h = 0; h < out_shape[0]; ++h) {
    for (int ww = 0; ww < out_shape[1]; ++ww) {
      for (int l = 0; l < out_shape[2]; ++l) {
        const Coord3 o{h, ww, l};
        bool touched = false;
        for (int oc = 0; oc < w.out_channels; ++oc) {
          out.at(o, oc) = w.bias.empty() ? 0.0 : w.bias[oc];
        }
        for (int k = 0; k < kernel.volume(); ++k) {
          const Coord3 off = kernel.offset(k);
          const Coord3 p{h * kernel.stride[0] + off[0], ww * kernel.stride[1] + off[1],
                         l * kernel.stride[2] + off[2]};
          if (!inside(p, in.shape)) continue;
          touched = touched || in.is_active(p);
          for (int ic = 0; ic < w.in_channels; ++ic) {
            const double v = in.at(p, ic);
            for (int oc = 0; oc < w.out_channels; ++oc) out.at(o, oc) += w.w(k, ic, oc) * v;
          }
        }
        const bool keep = kernel.mode == ConvMode::submanifold ? in.is_active(o) : touched;
        out.active[flat_index(o, out_shape)] = keep ? 1 : 0;
        if (kernel.mode == ConvMode::submanifold && !keep) {
          for (int oc = 0; oc < w.out_channels; ++oc) out.at(o, oc) = 0.0;
        }
      }
    }
  }
  return out;
}

DenseGrid dense_transposed_conv_oracle(const DenseGrid& in, const ConvWeightsView& w,
                                       const KernelSpec& kernel, Shape3 fine_shape) {
  DenseGrid out(fine_shape, w.out_channels);
  for (int h = 0; h < fine_shape[0]; ++h) {
    for (int ww = 0; ww < fine_shape[1]; ++ww) {
      for (int l = 0; l < fine_shape[2]; ++l) {
        for (int oc = 0; oc < w.out_channels; ++oc) {
          out.at({h, ww, l}, oc) = w.bias.empty() ? 0.0 : w.bias[oc];
        }
      }
    }
  }
  // Scatter each coarse position through every kernel tap.
  for (int h = 0; h < in.shape[0]; ++h) {
    for (int ww = 0; ww < in.shape[1]; ++ww) {
      for (int l = 0; l < in.shape[2]; ++l) {
        const Coord3 q{h, ww, l};
        for (int k = 0; k < kernel.volume(); ++k) {
          const Coord3 off = kernel.offset(k);
          const Coord3 p{h * kernel.stride[0] + off[0], ww * kernel.stride[1] + off[1],
                         l * kernel.stride[2] + off[2]};
          if (!inside(p, fine_shape)) continue;
          if (in.is_active(q)) out.active[flat_index(p, fine_shape)] = 1;
          for (int ic = 0; ic < w.in_channels; ++ic) {
            const double v = in.at(q, ic);
            for (int oc = 0; oc < w.out_channels; ++oc) out.at(p, oc) += w.w(k, ic, oc) * v;
          }
        }
      }
    }
  }
  return out;
}

}  // namespace cylseg
