#include "cylseg/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "cylseg/dense_oracle.hpp"
#include "cylseg/losses.hpp"
#include "cylseg/network.hpp"
#include "cylseg/partition.hpp"
#include "cylseg/random.hpp"
#include "cylseg/sparse_ops.hpp"

namespace cylseg {

SparseTensor random_sparse_tensor(Shape3 shape, int channels, double density, uint64_t seed) {
  Rng rng(seed);
  SparseTensor x;
  x.spatial_shape = shape;
  for (int h = 0; h < shape[0]; ++h) {
    for (int w = 0; w < shape[1]; ++w) {
      for (int l = 0; l < shape[2]; ++l) {
        if (rng.uniform() < density) x.coords.push_back({h, w, l});
      }
    }
  }
  if (x.coords.empty()) {
    x.coords.push_back({static_cast<int32_t>(rng.below(shape[0])),
                        static_cast<int32_t>(rng.below(shape[1])),
                        static_cast<int32_t>(rng.below(shape[2]))});
  }
  x.features = Matrix(x.coords.size(), channels);
  for (double& v : x.features.data) v = rng.normal();
  return x;
}

std::vector<KernelSpec> network_kernel_specs() {
  return {KernelSpec::submanifold({1, 3, 3}), KernelSpec::submanifold({3, 1, 3}),
          KernelSpec::submanifold({3, 1, 1}), KernelSpec::submanifold({1, 3, 1}),
          KernelSpec::submanifold({1, 1, 3}), KernelSpec::submanifold({3, 3, 3}),
          KernelSpec::submanifold({1, 1, 1}), KernelSpec::strided({3, 3, 3}, {2, 2, 2})};
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Largest |sparse - dense| over the sparse sites; -1 when the active sets
// differ.
double compare_to_dense(const SparseTensor& y, const DenseGrid& dense) {
  std::size_t active = 0;
  for (uint8_t a : dense.active) active += a;
  if (active != y.size() || y.spatial_shape != dense.shape) return -1.0;
  double err = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!dense.is_active(y.coords[i])) return -1.0;
    for (std::size_t c = 0; c < y.channels(); ++c) {
      err = std::max(err, std::abs(y.features(i, c) - dense.at(y.coords[i], static_cast<int>(c))));
    }
  }
  return err;
}

ConvParams random_conv(int kvol, int cin, int cout, bool bias, Rng& rng) {
  ConvParams p(kvol, cin, cout, bias);
  for (double& v : p.weights) v = rng.normal();
  for (double& v : p.bias) v = rng.normal();
  return p;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = scale * rng.normal();
  return m;
}

// <y - bias, g> = <x, dX> = <W, dW> holds for any linear map with adjoint.
bool adjoint_holds(const Matrix& y, const ConvParams& p, const Matrix& g,
                   const Matrix& x, const ConvGrads& grads, double tolerance) {
  double lhs = dot(y.data, g.data);
  for (std::size_t r = 0; r < g.rows; ++r) {
    for (std::size_t c = 0; c < g.cols && !p.bias.empty(); ++c) lhs -= p.bias[c] * g(r, c);
  }
  const double via_x = dot(x.data, grads.grad_input.data);
  const double via_w = dot(p.weights, grads.grad_weights);
  const double scale = 1.0 + std::abs(lhs);
  return std::abs(lhs - via_x) <= tolerance * scale && std::abs(lhs - via_w) <= tolerance * scale;
}

}  // namespace

ConvOracleStats conv_oracle_suite(int instances, uint64_t seed, double tolerance) {
  const auto specs = network_kernel_specs();
  const int kinds = static_cast<int>(specs.size()) + 1;  // last kind = inverse conv
  ConvOracleStats stats;
  Rng rng(seed);
  for (int i = 0; i < instances; ++i) {
    const int kind = i % kinds;
    const Shape3 shape{1 + static_cast<int32_t>(rng.below(16)),
                       1 + static_cast<int32_t>(rng.below(16)),
                       1 + static_cast<int32_t>(rng.below(16))};
    const int cin = 1 + static_cast<int>(rng.below(8));
    const int cout = 1 + static_cast<int>(rng.below(8));
    const double density = rng.uniform(0.02, 0.4);
    const bool bias = rng.below(2) == 1;
    const SparseTensor x = random_sparse_tensor(shape, cin, density, rng.next_u64());
    bool ok = true;
    double err = 0.0;

    if (kind < static_cast<int>(specs.size())) {
      const KernelSpec& spec = specs[kind];
      const ConvParams p = random_conv(spec.volume(), cin, cout, bias, rng);
      const Rulebook rb = build_rulebook(x.coords, x.spatial_shape, spec);
      const SparseTensor y = sparse_conv_forward(x, p.view(), rb);
      err = compare_to_dense(y, dense_conv_oracle(densify(x), p.view(), spec));
      const Matrix g = random_matrix(y.size(), y.channels(), rng);
      ok = err >= 0.0 && adjoint_holds(y.features, p, g, x.features,
                                       sparse_conv_backward(x, p.view(), rb, g), tolerance);
    } else {
      const KernelSpec spec = KernelSpec::strided({3, 3, 3}, {2, 2, 2});
      const Rulebook rb = build_rulebook(x.coords, x.spatial_shape, spec);
      SparseTensor coarse;
      coarse.coords = rb.out_coords;
      coarse.spatial_shape = rb.out_shape;
      coarse.features = random_matrix(coarse.coords.size(), cin, rng);
      const ConvParams p = random_conv(spec.volume(), cin, cout, bias, rng);
      const SparseTensor y = inverse_conv(coarse, p.view(), rb);
      const DenseGrid dense =
          dense_transposed_conv_oracle(densify(coarse), p.view(), spec, x.spatial_shape);
      ok = y.coords == x.coords && y.spatial_shape == x.spatial_shape;
      for (std::size_t s = 0; ok && s < y.size(); ++s) {
        for (int c = 0; c < cout; ++c) {
          err = std::max(err, std::abs(y.features(s, c) - dense.at(y.coords[s], c)));
        }
      }
      const Matrix g = random_matrix(y.size(), y.channels(), rng);
      ok = ok && adjoint_holds(y.features, p, g, coarse.features,
                               inverse_conv_backward(coarse, p.view(), rb, g), tolerance);
    }
    ++stats.instances;
    if (!ok || err < 0.0 || err >= tolerance) ++stats.failures;
    if (err >= 0.0) stats.max_abs_error = std::max(stats.max_abs_error, err);
  }
  return stats;
}

// --- Gradient suite -----------------------------------------------------------

double GradientSuiteStats::max_isolated_error() const {
  double e = 0.0;
  for (const auto& r : isolated) e = std::max(e, r.report.max_rel_error());
  return e;
}

bool GradientSuiteStats::pass(double isolated_tolerance, double end_to_end_tolerance) const {
  for (const auto& r : isolated) {
    for (const auto& b : r.report.blocks) {
      if (!b.finite || b.max_rel_error >= isolated_tolerance) return false;
    }
  }
  for (const auto& b : end_to_end.report.blocks) {
    if (!b.finite || b.max_rel_error >= end_to_end_tolerance) return false;
  }
  return true;
}

namespace {

using LossFn = std::function<double(const TensorMap&, TensorMap*)>;

FdReport check(const LossFn& f, const TensorMap& point, double tolerance, uint64_t seed) {
  TensorMap analytic;
  f(point, &analytic);
  FdOptions o;
  o.tolerance = tolerance;
  o.seed = seed;
  return finite_diff_check([&](const TensorMap& t) { return f(t, nullptr); }, point, analytic, o);
}

Tensor as_tensor(const Matrix& m) {
  Tensor t({m.rows, m.cols});
  t.values = m.data;
  return t;
}

Matrix as_matrix(const Tensor& t, std::size_t cols) {
  Matrix m(t.size() / cols, cols);
  m.data = t.values;
  return m;
}

Tensor as_tensor(const std::vector<double>& v) {
  Tensor t({v.size()});
  t.values = v;
  return t;
}

// Values bounded away from zero so LeakyReLU kinks are never straddled.
Matrix away_from_zero(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.1, 1.5);
  return m;
}

// Weighted sum with a fixed random projection, the scalar head used to test
// matrix-valued operations.
struct Projection {
  Matrix r;
  double apply(const Matrix& y) const { return dot(y.data, r.data); }
};

void add_conv_checks(GradientSuiteStats& out, Rng& rng) {
  for (const KernelSpec& spec : network_kernel_specs()) {
    const SparseTensor x = random_sparse_tensor({5, 5, 5}, 3, 0.3, rng.next_u64());
    const Rulebook rb = build_rulebook(x.coords, x.spatial_shape, spec);
    const ConvParams p0 = random_conv(spec.volume(), 3, 2, true, rng);
    const Projection proj{random_matrix(rb.out_coords.size(), 2, rng)};
    TensorMap point{{"x", as_tensor(x.features)}, {"w", as_tensor(p0.weights)},
                    {"b", as_tensor(p0.bias)}};
    const LossFn f = [&](const TensorMap& t, TensorMap* g) {
      ConvParams p = p0;
      p.weights = t.at("w").values;
      p.bias = t.at("b").values;
      SparseTensor xi = x;
      xi.features = as_matrix(t.at("x"), 3);
      const SparseTensor y = sparse_conv_forward(xi, p.view(), rb);
      if (g) {
        const ConvGrads cg = sparse_conv_backward(xi, p.view(), rb, proj.r);
        *g = {{"x", as_tensor(cg.grad_input)}, {"w", as_tensor(cg.grad_weights)},
              {"b", as_tensor(cg.grad_bias)}};
      }
      return proj.apply(y.features);
    };
    std::string name = "sparse_conv ";
    for (int a : spec.size) name += std::to_string(a);
    if (spec.mode == ConvMode::strided) name += " stride 2";
    out.isolated.push_back({name, check(f, point, 1e-6, rng.next_u64())});
  }

  // Inverse conv.
  const SparseTensor fine = random_sparse_tensor({6, 6, 6}, 1, 0.3, rng.next_u64());
  const Rulebook rb = build_rulebook(fine.coords, fine.spatial_shape,
                                     KernelSpec::strided({3, 3, 3}, {2, 2, 2}));
  SparseTensor coarse{rb.out_coords, random_matrix(rb.out_coords.size(), 3, rng), rb.out_shape};
  const ConvParams p0 = random_conv(27, 3, 2, true, rng);
  const Projection proj{random_matrix(fine.size(), 2, rng)};
  TensorMap point{{"x", as_tensor(coarse.features)}, {"w", as_tensor(p0.weights)},
                  {"b", as_tensor(p0.bias)}};
  const LossFn f = [&](const TensorMap& t, TensorMap* g) {
    ConvParams p = p0;
    p.weights = t.at("w").values;
    p.bias = t.at("b").values;
    SparseTensor xi = coarse;
    xi.features = as_matrix(t.at("x"), 3);
    const SparseTensor y = inverse_conv(xi, p.view(), rb);
    if (g) {
      const ConvGrads cg = inverse_conv_backward(xi, p.view(), rb, proj.r);
      *g = {{"x", as_tensor(cg.grad_input)}, {"w", as_tensor(cg.grad_weights)},
            {"b", as_tensor(cg.grad_bias)}};
    }
    return proj.apply(y.features);
  };
  out.isolated.push_back({"inverse_conv", check(f, point, 1e-6, rng.next_u64())});
}

void add_elementwise_checks(GradientSuiteStats& out, Rng& rng) {
  {  // batch norm, training mode
    const Matrix x0 = random_matrix(12, 4, rng);
    const Projection proj{random_matrix(12, 4, rng)};
    NormParams np(4);
    for (double& v : np.scale) v = rng.uniform(0.5, 1.5);
    for (double& v : np.shift) v = rng.normal();
    TensorMap point{{"x", as_tensor(x0)}, {"scale", as_tensor(np.scale)},
                    {"shift", as_tensor(np.shift)}};
    const LossFn f = [&](const TensorMap& t, TensorMap* g) {
      NormParams p = np;
      p.scale = t.at("scale").values;
      p.shift = t.at("shift").values;
      NormCache cache;
      const Matrix x = as_matrix(t.at("x"), 4);
      const Matrix y = batch_norm_forward(x, view_of(p), true, &cache);
      if (g) {
        const NormGrads ng = batch_norm_backward(proj.r, view_of(p), cache);
        *g = {{"x", as_tensor(ng.grad_input)}, {"scale", as_tensor(ng.grad_scale)},
              {"shift", as_tensor(ng.grad_shift)}};
      }
      return proj.apply(y);
    };
    out.isolated.push_back({"batch_norm", check(f, point, 1e-6, rng.next_u64())});
  }
  {  // leaky relu and sigmoid
    const Matrix x0 = away_from_zero(10, 3, rng);
    const Projection proj{random_matrix(10, 3, rng)};
    const LossFn relu = [&](const TensorMap& t, TensorMap* g) {
      const Matrix x = as_matrix(t.at("x"), 3);
      if (g) *g = {{"x", as_tensor(leaky_relu_backward(proj.r, x, 0.1))}};
      return proj.apply(leaky_relu(x, 0.1));
    };
    out.isolated.push_back({"leaky_relu", check(relu, {{"x", as_tensor(x0)}}, 1e-6, 1)});
    const LossFn sig = [&](const TensorMap& t, TensorMap* g) {
      const Matrix y = sigmoid(as_matrix(t.at("x"), 3));
      if (g) *g = {{"x", as_tensor(sigmoid_backward(proj.r, y))}};
      return proj.apply(y);
    };
    out.isolated.push_back({"sigmoid", check(sig, {{"x", as_tensor(x0)}}, 1e-6, 2)});
  }
  {  // linear
    const Matrix x0 = random_matrix(7, 4, rng);
    const Projection proj{random_matrix(7, 3, rng)};
    TensorMap point{{"x", as_tensor(x0)},
                    {"w", as_tensor(random_matrix(4, 3, rng))},
                    {"b", as_tensor(random_matrix(1, 3, rng))}};
    const LossFn f = [&](const TensorMap& t, TensorMap* g) {
      const Matrix x = as_matrix(t.at("x"), 4);
      const Matrix y = linear_forward(x, t.at("w").values, t.at("b").values, 3);
      if (g) {
        *g = zeros_like(t);
        (*g)["x"] = as_tensor(linear_backward(x, t.at("w").values, proj.r, (*g)["w"].values,
                                              (*g)["b"].values));
      }
      return proj.apply(y);
    };
    out.isolated.push_back({"linear", check(f, point, 1e-6, rng.next_u64())});
  }
  {  // max scatter
    PointCloud cloud;
    for (int i = 0; i < 40; ++i) {
      cloud.xyz.push_back({rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-1, 1)});
      cloud.intensity.push_back(0.0);
    }
    CylGridSpec grid;
    grid.rho_max = 6.0;
    grid.z_min = -1.0;
    grid.z_max = 1.0;
    grid.resolution = {3, 4, 2};
    const VoxelMapping mapping = assign_cells(cloud, grid);
    const Matrix f0 = random_matrix(40, 3, rng);
    const Projection proj{random_matrix(mapping.num_cells(), 3, rng)};
    const LossFn f = [&](const TensorMap& t, TensorMap* g) {
      std::vector<int32_t> argmax;
      const SparseTensor s = scatter_features(as_matrix(t.at("x"), 3), mapping, &argmax);
      if (g) *g = {{"x", as_tensor(scatter_features_backward(proj.r, argmax, 40))}};
      return proj.apply(s.features);
    };
    out.isolated.push_back({"scatter_max", check(f, {{"x", as_tensor(f0)}}, 1e-6, 3)});
  }
}

void add_loss_checks(GradientSuiteStats& out, Rng& rng) {
  const int m = 9, k = 3;
  std::vector<int32_t> targets(m);
  for (int i = 0; i < m; ++i) targets[i] = i == 4 ? 255 : static_cast<int32_t>(rng.below(k));
  const std::vector<double> weights{0.7, 1.3, 2.0};
  const Matrix z0 = random_matrix(m, k, rng);

  const LossFn ce = [&](const TensorMap& t, TensorMap* g) {
    const LossWithGrad l = weighted_ce(as_matrix(t.at("z"), k), targets, weights, 255);
    if (g) *g = {{"z", as_tensor(l.grad)}};
    return l.loss;
  };
  out.isolated.push_back({"weighted_ce", check(ce, {{"z", as_tensor(z0)}}, 1e-6, 4)});

  const LossFn lov = [&](const TensorMap& t, TensorMap* g) {
    const LossWithGrad l = lovasz_softmax(softmax_rows(as_matrix(t.at("z"), k)), targets, 255);
    if (g) {
      const Matrix p = softmax_rows(as_matrix(t.at("z"), k));
      *g = {{"z", as_tensor(softmax_backward(l.grad, p))}};
    }
    return l.loss;
  };
  out.isolated.push_back({"lovasz_softmax(softmax)", check(lov, {{"z", as_tensor(z0)}}, 1e-6, 5)});

  const Matrix v0 = random_matrix(5, k, rng);
  const std::vector<int32_t> vt{0, 2, 1, 255, 2};
  const LossFn total = [&](const TensorMap& t, TensorMap* g) {
    const TotalLoss l = total_loss(as_matrix(t.at("voxel"), k), vt, as_matrix(t.at("point"), k),
                                   targets, weights, 255);
    if (g) {
      *g = {{"voxel", as_tensor(l.grad_voxel_logits)},
            {"point", as_tensor(l.grad_point_logits)}};
    }
    return l.report.total;
  };
  out.isolated.push_back(
      {"total_loss", check(total, {{"voxel", as_tensor(v0)}, {"point", as_tensor(z0)}}, 1e-6, 6)});
}

// Single network blocks on a random sparse input. The input features are
// checked alongside the block parameters under the name "input".
void add_block_checks(GradientSuiteStats& out, Rng& rng) {
  const ForwardContext ctx{true, 0.1, 1e-5, nullptr};
  const SparseTensor x = random_sparse_tensor({6, 6, 4}, 4, 0.35, rng.next_u64());

  for (BlockVariant v : {BlockVariant::asym, BlockVariant::asym1d, BlockVariant::regular}) {
    for (int cout : {4, 2}) {
      const ResBlock block("res", v, 4, cout);
      ModelParams p;
      block.declare(p, rng);
      const Projection proj{random_matrix(x.size(), cout, rng)};
      TensorMap point = p.weights;
      point["input"] = as_tensor(x.features);
      const LossFn f = [&](const TensorMap& t, TensorMap* g) {
        const ModelParams q{t, p.buffers};
        RulebookCache books(x.coords, x.spatial_shape);
        SparseTensor xi = x;
        xi.features = as_matrix(t.at("input"), 4);
        ResBlock::Cache cache;
        const SparseTensor y = block.forward(q, xi, books, ctx, cache);
        if (g) {
          *g = zeros_like(t);
          (*g)["input"] = as_tensor(block.backward(q, cache, proj.r, ctx, *g));
        }
        return proj.apply(y.features);
      };
      out.isolated.push_back({"res_block " + to_string(v) + " 4->" + std::to_string(cout),
                              check(f, point, 1e-6, rng.next_u64())});
    }
  }

  {
    const Ddcm block("ddcm", 4);
    ModelParams p;
    block.declare(p, rng);
    const Projection proj{random_matrix(x.size(), 4, rng)};
    TensorMap point = p.weights;
    point["input"] = as_tensor(x.features);
    const LossFn f = [&](const TensorMap& t, TensorMap* g) {
      const ModelParams q{t, p.buffers};
      RulebookCache books(x.coords, x.spatial_shape);
      SparseTensor xi = x;
      xi.features = as_matrix(t.at("input"), 4);
      Ddcm::Cache cache;
      const SparseTensor y = block.forward(q, xi, books, ctx, cache);
      if (g) {
        *g = zeros_like(t);
        (*g)["input"] = as_tensor(block.backward(q, cache, proj.r, ctx, *g));
      }
      return proj.apply(y.features);
    };
    out.isolated.push_back({"ddcm", check(f, point, 1e-6, rng.next_u64())});
  }

  {  // down block followed by the paired up block
    const DownBlock down("enc", BlockVariant::asym, 2);
    const UpBlock up("dec", BlockVariant::asym, 2);
    ModelParams p;
    down.declare(p, rng);
    up.declare(p, rng);
    const SparseTensor x2 = random_sparse_tensor({6, 6, 4}, 2, 0.35, rng.next_u64());
    const Projection proj{random_matrix(x2.size(), 2, rng)};
    TensorMap point = p.weights;
    point["input"] = as_tensor(x2.features);
    const LossFn f = [&](const TensorMap& t, TensorMap* g) {
      const ModelParams q{t, p.buffers};
      RulebookCache books(x2.coords, x2.spatial_shape);
      SparseTensor xi = x2;
      xi.features = as_matrix(t.at("input"), 2);
      DownBlock::Cache dc;
      const DownBlock::Output o = down.forward(q, xi, books, ctx, dc);
      UpBlock::Cache uc;
      const SparseTensor y = up.forward(q, o.out, o.skip, o.rulebook, books, ctx, uc);
      if (g) {
        *g = zeros_like(t);
        const UpBlock::Grads ug = up.backward(q, uc, proj.r, ctx, *g);
        (*g)["input"] = as_tensor(down.backward(q, dc, ug.input, ug.skip, ctx, *g));
      }
      return proj.apply(y.features);
    };
    out.isolated.push_back({"down+up blocks", check(f, point, 1e-6, rng.next_u64())});
  }

  {  // point MLP and point refinement
    const PointMlp mlp("mlp", 5, {6, 3});
    const PointRefine refine("refine", 4, 3, 3);
    ModelParams p;
    mlp.declare(p, rng);
    refine.declare(p, rng);
    const Matrix pin = random_matrix(20, 5, rng);
    const Matrix vox = random_matrix(6, 4, rng);
    std::vector<int32_t> site(20);
    for (auto& s : site) s = static_cast<int32_t>(rng.below(6));
    const Projection proj{random_matrix(20, 3, rng)};
    TensorMap point = p.weights;
    point["input"] = as_tensor(pin);
    point["voxel"] = as_tensor(vox);
    const LossFn f = [&](const TensorMap& t, TensorMap* g) {
      const ModelParams q{t, p.buffers};
      PointMlp::Cache mc;
      const Matrix pf = mlp.forward(q, as_matrix(t.at("input"), 5), ctx, mc);
      PointRefine::Cache rc;
      const Matrix y = refine.forward(q, as_matrix(t.at("voxel"), 4), pf, site, ctx, rc);
      if (g) {
        *g = zeros_like(t);
        const PointRefine::Grads rg = refine.backward(q, rc, proj.r, site, 6, ctx, *g);
        (*g)["voxel"] = as_tensor(rg.voxel);
        (*g)["input"] = as_tensor(mlp.backward(q, mc, rg.point, ctx, *g));
      }
      return proj.apply(y);
    };
    out.isolated.push_back({"point_mlp+refine", check(f, point, 1e-6, rng.next_u64())});
  }
}

NamedFdReport end_to_end_check(uint64_t seed) {
  SyntheticSceneSpec ss;
  ss.seed = seed;
  ss.num_points = 200;
  ss.max_range = 20.0;
  ss.min_range = 1.0;
  const PointCloud cloud = generate_synthetic_scene(ss);
  NetworkConfig cfg;
  cfg.base_channels = 4;
  cfg.num_stages = 2;
  cfg.point_mlp_widths = {8};
  cfg.grid.rho_max = 20.0;
  cfg.grid.resolution = {16, 16, 8};
  const Network net(cfg);
  const ModelParams params = net.init_params(seed);
  const VoxelMapping mapping = assign_cells(cloud, cfg.grid);
  const auto vt = encode_cell_labels(mapping, *cloud.labels, LabelEncoding::majority,
                                     cfg.num_classes, 255);
  const std::vector<double> w{0.8, 1.4, 1.1};
  const LossFn f = [&](const TensorMap& t, TensorMap* g) {
    const ModelParams q{t, params.buffers};
    ForwardTrace tr;
    const ForwardResult r = net.forward(cloud, mapping, q, true, &tr);
    const TotalLoss l =
        total_loss(r.voxel_logits.features, vt, r.point_logits, *cloud.labels, w, 255);
    if (g) *g = net.backward(q, tr, l.grad_voxel_logits, l.grad_point_logits);
    return l.report.total;
  };
  return {"network end-to-end", check(f, params.weights, 1e-4, seed)};
}

}  // namespace

GradientSuiteStats gradient_suite(uint64_t seed) {
  GradientSuiteStats stats;
  Rng rng(seed);
  add_conv_checks(stats, rng);
  add_elementwise_checks(stats, rng);
  add_loss_checks(stats, rng);
  add_block_checks(stats, rng);
  stats.end_to_end = end_to_end_check(seed);
  return stats;
}

// --- Lovász -------------------------------------------------------------------

double lovasz_softmax_bruteforce(const Matrix& probs, std::span<const int32_t> targets,
                                 int32_t ignore_id) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] != ignore_id) rows.push_back(i);
  }
  double total = 0.0;
  int present = 0;
  for (std::size_t c = 0; c < probs.cols; ++c) {
    std::vector<double> err;
    std::vector<bool> fg;
    for (std::size_t i : rows) {
      const bool is_fg = targets[i] == static_cast<int32_t>(c);
      fg.push_back(is_fg);
      err.push_back(std::abs((is_fg ? 1.0 : 0.0) - probs(i, c)));
    }
    if (std::find(fg.begin(), fg.end(), true) == fg.end()) continue;
    ++present;
    // Jaccard loss of the set A of rows treated as mispredicted.
    const auto jaccard = [&](const std::vector<bool>& in_a) {
      double inter = 0.0, uni = 0.0;
      for (std::size_t i = 0; i < fg.size(); ++i) {
        if (fg[i] && !in_a[i]) inter += 1.0;
        if (fg[i] || in_a[i]) uni += 1.0;
      }
      return 1.0 - inter / uni;
    };
    // Integral over t of J({i : err_i >= t}) on [0, max err], piecewise
    // constant between distinct error values.
    std::vector<double> levels = err;
    levels.push_back(0.0);
    std::sort(levels.begin(), levels.end(), std::greater<>());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    double value = 0.0;
    for (std::size_t j = 0; j + 1 < levels.size(); ++j) {
      std::vector<bool> in_a(err.size());
      for (std::size_t i = 0; i < err.size(); ++i) in_a[i] = err[i] >= levels[j];
      value += (levels[j] - levels[j + 1]) * jaccard(in_a);
    }
    total += value;
  }
  return present ? total / present : 0.0;
}

LovaszSuiteStats lovasz_suite(int instances, uint64_t seed) {
  LovaszSuiteStats s;
  Rng rng(seed);
  for (int i = 0; i < instances; ++i) {
    const int m = 1 + static_cast<int>(rng.below(6));
    const int k = 2 + static_cast<int>(rng.below(2));
    Matrix z = random_matrix(m, k, rng, 2.0);
    // Some instances get tied probabilities to exercise tie handling.
    if (i % 5 == 0 && m > 1) {
      for (int c = 0; c < k; ++c) z(1, c) = z(0, c);
    }
    const Matrix p = softmax_rows(z);
    std::vector<int32_t> t(m);
    for (auto& v : t) v = rng.below(8) == 0 ? 255 : static_cast<int32_t>(rng.below(k));
    const double got = lovasz_softmax(p, t, 255).loss;
    const double want = lovasz_softmax_bruteforce(p, t, 255);
    s.max_abs_error = std::max(s.max_abs_error, std::abs(got - want));

    Matrix perfect(m, k);
    std::vector<int32_t> pt(m);
    for (int r = 0; r < m; ++r) {
      pt[r] = static_cast<int32_t>(rng.below(k));
      perfect(r, pt[r]) = 1.0;
    }
    if (lovasz_softmax(perfect, pt, 255).loss != 0.0) s.perfect_is_zero = false;
    ++s.instances;
  }
  return s;
}

// --- Driver -------------------------------------------------------------------

bool run_selftest(std::ostream& out, uint64_t seed) {
  using clock = std::chrono::steady_clock;
  bool all = true;
  const auto line = [&](bool pass, const std::string& name, const std::string& detail,
                        clock::time_point t0) {
    all = all && pass;
    out << (pass ? "PASS " : "FAIL ") << std::left << std::setw(26) << name << ' ' << detail
        << " (" << std::fixed << std::setprecision(1)
        << std::chrono::duration<double>(clock::now() - t0).count() << " s)" << std::defaultfloat
        << '\n';
  };
  const auto sci = [](double v) {
    std::ostringstream s;
    s << std::scientific << std::setprecision(2) << v;
    return s.str();
  };

  auto t0 = clock::now();
  const ConvOracleStats conv = conv_oracle_suite(200, seed);
  line(conv.pass(1e-10), "conv oracle equivalence",
       std::to_string(conv.instances) + " instances, max abs err " + sci(conv.max_abs_error), t0);

  t0 = clock::now();
  const GradientSuiteStats grad = gradient_suite(seed);
  line(grad.pass(1e-6, 1e-4), "finite differences",
       std::to_string(grad.isolated.size()) + " op/block checks max rel " +
           sci(grad.max_isolated_error()) + ", network max rel " +
           sci(grad.end_to_end.report.max_rel_error()),
       t0);
  if (!grad.pass(1e-6, 1e-4)) {
    for (const auto& r : grad.isolated) {
      if (!r.report.pass()) {
        out << "  " << r.name << ":\n";
        r.report.print(out);
      }
    }
    if (!grad.end_to_end.report.pass()) grad.end_to_end.report.print(out);
  }

  t0 = clock::now();
  const LovaszSuiteStats lov = lovasz_suite(300, seed);
  line(lov.max_abs_error < 1e-10 && lov.perfect_is_zero, "lovasz brute force",
       std::to_string(lov.instances) + " instances, max abs err " + sci(lov.max_abs_error), t0);
  return all;
}

}  // namespace cylseg
