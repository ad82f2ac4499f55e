#include "cylseg/network.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace cylseg {

namespace {

void accumulate(TensorMap& grads, const std::string& name, std::span<const double> g) {
  auto& dst = grads.at(name).values;
  if (dst.size() != g.size()) throw ShapeError("gradient size mismatch for " + name);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

std::span<double> grad_span(TensorMap& grads, const std::string& name) {
  return grads.at(name).values;
}

void init_linear(Tensor& w, std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (double& v : w.values) v = rng.uniform(-bound, bound);
}

SparseTensor with_features(const SparseTensor& like, Matrix f) {
  return {like.coords, std::move(f), like.spatial_shape};
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

}  // namespace

std::string to_string(BlockVariant v) {
  switch (v) {
    case BlockVariant::regular: return "regular";
    case BlockVariant::asym1d: return "asym1d";
    case BlockVariant::asym: return "asym";
  }
  return "asym";
}

BlockVariant block_variant_from_string(const std::string& s) {
  if (s == "regular") return BlockVariant::regular;
  if (s == "asym1d") return BlockVariant::asym1d;
  if (s == "asym") return BlockVariant::asym;
  throw ConfigError("unknown block variant '" + s + "' (regular|asym1d|asym)");
}

// --- NetworkConfig ----------------------------------------------------------

void NetworkConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (num_stages < 1) throw ConfigError("num_stages must be >= 1");
  for (int w : point_mlp_widths) {
    if (w < 1) throw ConfigError("point_mlp_widths entries must be >= 1");
  }
  grid.validate();
  if (grid.resolution[2] % (1 << num_stages) != 0) {
    throw ConfigError("grid height must be divisible by 2^num_stages");
  }
  if (!(leaky_slope >= 0.0) || !(norm_epsilon > 0.0) ||
      !(norm_momentum >= 0.0 && norm_momentum < 1.0)) {
    throw ConfigError("invalid activation/normalization constants");
  }
}

namespace {

std::string fmt_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t used = 0;
    const int x = std::stoi(item, &used);
    if (used != item.size()) throw ConfigError("bad integer '" + item + "'");
    out.push_back(x);
  }
  return out;
}

}  // namespace

std::string NetworkConfig::to_text() const {
  std::ostringstream s;
  s << "num_classes = " << num_classes << '\n';
  s << "base_channels = " << base_channels << '\n';
  s << "num_stages = " << num_stages << '\n';
  s << "point_mlp_widths = ";
  for (std::size_t i = 0; i < point_mlp_widths.size(); ++i) {
    s << (i ? "," : "") << point_mlp_widths[i];
  }
  s << '\n';
  s << "block_variant = " << to_string(block_variant) << '\n';
  s << "grid.rho_min = " << fmt_double(grid.rho_min) << '\n';
  s << "grid.rho_max = " << fmt_double(grid.rho_max) << '\n';
  s << "grid.z_min = " << fmt_double(grid.z_min) << '\n';
  s << "grid.z_max = " << fmt_double(grid.z_max) << '\n';
  s << "grid.resolution = " << grid.resolution[0] << ',' << grid.resolution[1] << ','
    << grid.resolution[2] << '\n';
  s << "leaky_slope = " << fmt_double(leaky_slope) << '\n';
  s << "norm_epsilon = " << fmt_double(norm_epsilon) << '\n';
  s << "norm_momentum = " << fmt_double(norm_momentum) << '\n';
  s << "use_intensity = " << (use_intensity ? "true" : "false") << '\n';
  return s.str();
}

NetworkConfig NetworkConfig::from_text(const std::string& text) {
  NetworkConfig c;
  c.point_mlp_widths.clear();
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed config line: " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "num_classes") c.num_classes = std::stoi(value);
      else if (key == "base_channels") c.base_channels = std::stoi(value);
      else if (key == "num_stages") c.num_stages = std::stoi(value);
      else if (key == "point_mlp_widths") c.point_mlp_widths = parse_int_list(value);
      else if (key == "block_variant") c.block_variant = block_variant_from_string(value);
      else if (key == "grid.rho_min") c.grid.rho_min = std::stod(value);
      else if (key == "grid.rho_max") c.grid.rho_max = std::stod(value);
      else if (key == "grid.z_min") c.grid.z_min = std::stod(value);
      else if (key == "grid.z_max") c.grid.z_max = std::stod(value);
      else if (key == "grid.resolution") {
        const auto r = parse_int_list(value);
        if (r.size() != 3) throw ConfigError("grid.resolution needs 3 integers");
        c.grid.resolution = {r[0], r[1], r[2]};
      } else if (key == "leaky_slope") c.leaky_slope = std::stod(value);
      else if (key == "norm_epsilon") c.norm_epsilon = std::stod(value);
      else if (key == "norm_momentum") c.norm_momentum = std::stod(value);
      else if (key == "use_intensity") c.use_intensity = value == "true" || value == "1";
      else throw ConfigError("unknown network key '" + key + "'");
    } catch (const std::logic_error&) {
      throw ConfigError("bad value for '" + key + "': " + value);
    }
  }
  c.validate();
  return c;
}

// --- RulebookCache ----------------------------------------------------------

const Rulebook& RulebookCache::submanifold(Shape3 kernel_size) {
  auto it = books_.find(kernel_size);
  if (it == books_.end()) {
    it = books_.emplace(kernel_size,
                        build_rulebook(coords_, shape_, KernelSpec::submanifold(kernel_size)))
             .first;
  }
  return it->second;
}

// --- ConvLayer / NormLayer / ConvNorm ---------------------------------------

void ConvLayer::declare(ModelParams& p, Rng& rng) const {
  const int kvol = kernel[0] * kernel[1] * kernel[2];
  Tensor w({static_cast<std::size_t>(kvol), static_cast<std::size_t>(in),
            static_cast<std::size_t>(out)});
  init_conv_weights(w.values, kvol, in, out, rng.next_u64());
  p.weights[name + ".w"] = std::move(w);
  if (bias) p.weights[name + ".b"] = Tensor({static_cast<std::size_t>(out)});
}

ConvWeightsView ConvLayer::view(const ModelParams& p) const {
  ConvWeightsView v;
  v.kernel_volume = kernel[0] * kernel[1] * kernel[2];
  v.in_channels = in;
  v.out_channels = out;
  v.weights = p.weights.at(name + ".w").values;
  if (bias) v.bias = p.weights.at(name + ".b").values;
  return v;
}

std::size_t ConvLayer::num_weights() const {
  return static_cast<std::size_t>(kernel[0] * kernel[1] * kernel[2]) * in * out;
}

NormLayer NormLayer::standardize(const std::string& name, int channels) {
  NormLayer n{name, channels, false};
  n.unit_scale.assign(channels, 1.0);
  n.zero_shift.assign(channels, 0.0);
  return n;
}

void NormLayer::declare(ModelParams& p) const {
  const std::vector<std::size_t> s{static_cast<std::size_t>(channels)};
  if (affine) {
    p.weights[name + ".scale"] = Tensor(s, 1.0);
    p.weights[name + ".shift"] = Tensor(s, 0.0);
  }
  p.buffers[name + ".running_mean"] = Tensor(s, 0.0);
  p.buffers[name + ".running_var"] = Tensor(s, 1.0);
}

NormView NormLayer::view(const ModelParams& p, double epsilon) const {
  if (!affine) {
    return {unit_scale, zero_shift, p.buffers.at(name + ".running_mean").values,
            p.buffers.at(name + ".running_var").values, epsilon};
  }
  return {p.weights.at(name + ".scale").values, p.weights.at(name + ".shift").values,
          p.buffers.at(name + ".running_mean").values,
          p.buffers.at(name + ".running_var").values, epsilon};
}

Matrix NormLayer::forward(const ModelParams& p, const Matrix& x, const ForwardContext& ctx,
                          NormCache& cache) const {
  Matrix y = batch_norm_forward(x, view(p, ctx.epsilon), ctx.training, &cache);
  if (ctx.training && ctx.norm_log && !cache.batch_mean.empty()) {
    ctx.norm_log->push_back({name, cache.batch_mean, cache.batch_var});
  }
  return y;
}

Matrix NormLayer::backward(const ModelParams& p, const NormCache& cache, const Matrix& grad,
                           double epsilon, TensorMap& grads) const {
  NormGrads g = batch_norm_backward(grad, view(p, epsilon), cache);
  if (!affine) return std::move(g.grad_input);
  accumulate(grads, name + ".scale", g.grad_scale);
  accumulate(grads, name + ".shift", g.grad_shift);
  return std::move(g.grad_input);
}

ConvNorm::ConvNorm(const std::string& name, Shape3 kernel, int in, int out)
    : conv{name + ".conv", kernel, in, out, false}, norm{name + ".norm", out} {}

void ConvNorm::declare(ModelParams& p, Rng& rng) const {
  conv.declare(p, rng);
  norm.declare(p);
}

SparseTensor ConvNorm::forward(const ModelParams& p, const SparseTensor& x,
                               RulebookCache& books, const ForwardContext& ctx,
                               Cache& cache) const {
  cache.rulebook = &books.submanifold(conv.kernel);
  cache.input = x;
  SparseTensor y = sparse_conv_forward(x, conv.view(p), *cache.rulebook);
  y.features = norm.forward(p, y.features, ctx, cache.norm);
  return y;
}

Matrix ConvNorm::backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                          const ForwardContext& ctx, TensorMap& grads) const {
  const Matrix gn = norm.backward(p, cache.norm, grad, ctx.epsilon, grads);
  ConvGrads g = sparse_conv_backward(cache.input, conv.view(p), *cache.rulebook, gn);
  accumulate(grads, conv.name + ".w", g.grad_weights);
  return std::move(g.grad_input);
}

// --- ResBlock ---------------------------------------------------------------

ResBlock::ResBlock(std::string name, BlockVariant variant, int in, int out)
    : name_(std::move(name)), variant_(variant), in_(in), out_(out) {
  switch (variant) {
    case BlockVariant::asym:
      convs_[0] = ConvNorm(name_ + ".a1", {1, 3, 3}, in, out);
      convs_[1] = ConvNorm(name_ + ".a2", {3, 1, 3}, out, out);
      convs_[2] = ConvNorm(name_ + ".b1", {3, 1, 3}, in, out);
      convs_[3] = ConvNorm(name_ + ".b2", {1, 3, 3}, out, out);
      break;
    case BlockVariant::asym1d:
      convs_[0] = ConvNorm(name_ + ".a1", {1, 3, 1}, in, out);
      convs_[1] = ConvNorm(name_ + ".a2", {3, 1, 1}, out, out);
      convs_[2] = ConvNorm(name_ + ".b1", {3, 1, 1}, in, out);
      convs_[3] = ConvNorm(name_ + ".b2", {1, 3, 1}, out, out);
      break;
    case BlockVariant::regular:
      convs_[0] = ConvNorm(name_ + ".c1", {3, 3, 3}, in, out);
      convs_[1] = ConvNorm(name_ + ".c2", {3, 3, 3}, out, out);
      projected_ = in != out;
      if (projected_) convs_[2] = ConvNorm(name_ + ".proj", {1, 1, 1}, in, out);
      break;
  }
}

void ResBlock::declare(ModelParams& p, Rng& rng) const {
  const int used = variant_ == BlockVariant::regular ? (projected_ ? 3 : 2) : 4;
  for (int i = 0; i < used; ++i) convs_[i].declare(p, rng);
}

std::size_t ResBlock::conv_weight_count() const {
  const int used = variant_ == BlockVariant::regular ? (projected_ ? 3 : 2) : 4;
  std::size_t n = 0;
  for (int i = 0; i < used; ++i) n += convs_[i].conv.num_weights();
  return n;
}

SparseTensor ResBlock::forward(const ModelParams& p, const SparseTensor& x,
                               RulebookCache& books, const ForwardContext& ctx,
                               Cache& cache) const {
  if (static_cast<int>(x.channels()) != in_) {
    throw ShapeError(name_ + ": expected " + std::to_string(in_) + " channels, got " +
                     std::to_string(x.channels()));
  }
  if (variant_ == BlockVariant::regular) {
    SparseTensor y1 = convs_[0].forward(p, x, books, ctx, cache.c[0]);
    cache.pre_a = y1.features;
    const SparseTensor a = with_features(x, leaky_relu(y1.features, ctx.slope));
    SparseTensor y2 = convs_[1].forward(p, a, books, ctx, cache.c[1]);
    Matrix sum = std::move(y2.features);
    if (projected_) {
      add_into(sum, convs_[2].forward(p, x, books, ctx, cache.c[2]).features);
    } else {
      add_into(sum, x.features);
    }
    cache.pre_out = sum;
    return with_features(x, leaky_relu(sum, ctx.slope));
  }
  SparseTensor ya = convs_[0].forward(p, x, books, ctx, cache.c[0]);
  cache.pre_a = ya.features;
  SparseTensor a = convs_[1].forward(p, with_features(x, leaky_relu(ya.features, ctx.slope)),
                                     books, ctx, cache.c[1]);
  SparseTensor yb = convs_[2].forward(p, x, books, ctx, cache.c[2]);
  cache.pre_b = yb.features;
  SparseTensor b = convs_[3].forward(p, with_features(x, leaky_relu(yb.features, ctx.slope)),
                                     books, ctx, cache.c[3]);
  Matrix sum = std::move(a.features);
  add_into(sum, b.features);
  cache.pre_out = sum;
  return with_features(x, leaky_relu(sum, ctx.slope));
}

Matrix ResBlock::backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                          const ForwardContext& ctx, TensorMap& grads) const {
  const Matrix gs = leaky_relu_backward(grad, cache.pre_out, ctx.slope);
  if (variant_ == BlockVariant::regular) {
    Matrix g1 = convs_[1].backward(p, cache.c[1], gs, ctx, grads);
    g1 = leaky_relu_backward(g1, cache.pre_a, ctx.slope);
    Matrix gx = convs_[0].backward(p, cache.c[0], g1, ctx, grads);
    if (projected_) {
      add_into(gx, convs_[2].backward(p, cache.c[2], gs, ctx, grads));
    } else {
      add_into(gx, gs);
    }
    return gx;
  }
  Matrix ga = convs_[1].backward(p, cache.c[1], gs, ctx, grads);
  ga = leaky_relu_backward(ga, cache.pre_a, ctx.slope);
  Matrix gx = convs_[0].backward(p, cache.c[0], ga, ctx, grads);
  Matrix gb = convs_[3].backward(p, cache.c[3], gs, ctx, grads);
  gb = leaky_relu_backward(gb, cache.pre_b, ctx.slope);
  add_into(gx, convs_[2].backward(p, cache.c[2], gb, ctx, grads));
  return gx;
}

// --- DownBlock / UpBlock ------------------------------------------------------

DownBlock::DownBlock(const std::string& name, BlockVariant variant, int channels)
    : res_(name + ".res", variant, channels, channels),
      down_{name + ".down", {3, 3, 3}, channels, 2 * channels, true} {}

void DownBlock::declare(ModelParams& p, Rng& rng) const {
  res_.declare(p, rng);
  down_.declare(p, rng);
}

DownBlock::Output DownBlock::forward(const ModelParams& p, const SparseTensor& x,
                                     RulebookCache& books, const ForwardContext& ctx,
                                     Cache& cache) const {
  cache.skip = res_.forward(p, x, books, ctx, cache.res);
  cache.rulebook = std::make_shared<const Rulebook>(
      build_rulebook(cache.skip.coords, cache.skip.spatial_shape,
                     KernelSpec::strided({3, 3, 3}, {2, 2, 2})));
  Output out;
  out.out = sparse_conv_forward(cache.skip, down_.view(p), *cache.rulebook);
  out.skip = cache.skip;
  out.rulebook = cache.rulebook;
  return out;
}

Matrix DownBlock::backward(const ModelParams& p, const Cache& cache, const Matrix& grad_out,
                           const Matrix& grad_skip, const ForwardContext& ctx,
                           TensorMap& grads) const {
  ConvGrads g = sparse_conv_backward(cache.skip, down_.view(p), *cache.rulebook, grad_out);
  accumulate(grads, down_.name + ".w", g.grad_weights);
  accumulate(grads, down_.name + ".b", g.grad_bias);
  if (grad_skip.rows > 0 || grad_skip.cols > 0) add_into(g.grad_input, grad_skip);
  return res_.backward(p, cache.res, g.grad_input, ctx, grads);
}

UpBlock::UpBlock(const std::string& name, BlockVariant variant, int channels)
    : channels_(channels),
      up_{name + ".up", {3, 3, 3}, 2 * channels, channels, false},
      norm_{name + ".up_norm", channels},
      fuse_(name + ".fuse", variant, 2 * channels, channels) {}

void UpBlock::declare(ModelParams& p, Rng& rng) const {
  up_.declare(p, rng);
  norm_.declare(p);
  fuse_.declare(p, rng);
}

SparseTensor UpBlock::forward(const ModelParams& p, const SparseTensor& x,
                              const SparseTensor& skip, std::shared_ptr<const Rulebook> stored,
                              RulebookCache& skip_books, const ForwardContext& ctx,
                              Cache& cache) const {
  if (skip.coords != stored->in_coords) {
    throw ShapeError("skip coordinates do not match the stored rulebook");
  }
  cache.input = x;
  cache.rulebook = std::move(stored);
  SparseTensor u = inverse_conv(x, up_.view(p), *cache.rulebook);
  cache.pre_act = norm_.forward(p, u.features, ctx, cache.norm);
  u.features = leaky_relu(cache.pre_act, ctx.slope);
  return fuse_.forward(p, concat_features(u, skip), skip_books, ctx, cache.fuse);
}

UpBlock::Grads UpBlock::backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                                 const ForwardContext& ctx, TensorMap& grads) const {
  const Matrix gcat = fuse_.backward(p, cache.fuse, grad, ctx, grads);
  auto [gu, gskip] = split_columns(gcat, static_cast<std::size_t>(channels_));
  gu = leaky_relu_backward(gu, cache.pre_act, ctx.slope);
  gu = norm_.backward(p, cache.norm, gu, ctx.epsilon, grads);
  ConvGrads g = inverse_conv_backward(cache.input, up_.view(p), *cache.rulebook, gu);
  accumulate(grads, up_.name + ".w", g.grad_weights);
  return {std::move(g.grad_input), std::move(gskip)};
}

// --- Ddcm -------------------------------------------------------------------

Ddcm::Ddcm(const std::string& name, int channels)
    : gates_{ConvNorm(name + ".h", {3, 1, 1}, channels, channels),
             ConvNorm(name + ".w", {1, 3, 1}, channels, channels),
             ConvNorm(name + ".l", {1, 1, 3}, channels, channels)} {}

void Ddcm::declare(ModelParams& p, Rng& rng) const {
  for (const auto& g : gates_) g.declare(p, rng);
}

SparseTensor Ddcm::forward(const ModelParams& p, const SparseTensor& x, RulebookCache& books,
                           const ForwardContext& ctx, Cache& cache) const {
  cache.input = x;
  Matrix sum(x.size(), x.channels());
  for (int i = 0; i < 3; ++i) {
    cache.gate[i] = sigmoid(gates_[i].forward(p, x, books, ctx, cache.c[i]).features);
    add_into(sum, cache.gate[i]);
  }
  return with_features(x, hadamard(x.features, sum));
}

Matrix Ddcm::backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                      const ForwardContext& ctx, TensorMap& grads) const {
  Matrix sum(cache.input.size(), cache.input.channels());
  for (const auto& g : cache.gate) add_into(sum, g);
  Matrix gx = hadamard(grad, sum);
  const Matrix g_gate = hadamard(grad, cache.input.features);
  for (int i = 0; i < 3; ++i) {
    const Matrix gy = sigmoid_backward(g_gate, cache.gate[i]);
    add_into(gx, gates_[i].backward(p, cache.c[i], gy, ctx, grads));
  }
  return gx;
}

// --- PointMlp -----------------------------------------------------------------

PointMlp::PointMlp(const std::string& name, int in, std::vector<int> widths)
    : name_(name),
      in_(in),
      widths_(std::move(widths)),
      in_norm_(NormLayer::standardize(name + ".in_norm", in)) {
  if (widths_.empty()) throw ConfigError("point MLP needs at least one layer");
  for (std::size_t i = 0; i < widths_.size(); ++i) {
    norms_.push_back({name_ + "." + std::to_string(i) + ".norm", widths_[i]});
  }
}

void PointMlp::declare(ModelParams& p, Rng& rng) const {
  in_norm_.declare(p);
  int prev = in_;
  for (std::size_t i = 0; i < widths_.size(); ++i) {
    Tensor w({static_cast<std::size_t>(prev), static_cast<std::size_t>(widths_[i])});
    init_linear(w, prev, widths_[i], rng);
    p.weights[name_ + "." + std::to_string(i) + ".w"] = std::move(w);
    norms_[i].declare(p);
    prev = widths_[i];
  }
}

Matrix PointMlp::forward(const ModelParams& p, const Matrix& x, const ForwardContext& ctx,
                         Cache& cache) const {
  if (static_cast<int>(x.cols) != in_) throw ShapeError("point MLP input width mismatch");
  Matrix h = in_norm_.forward(p, x, ctx, cache.in_norm);
  cache.inputs.assign(widths_.size(), {});
  cache.norms.assign(widths_.size(), {});
  cache.pre_act.assign(widths_.size(), {});
  for (std::size_t i = 0; i < widths_.size(); ++i) {
    cache.inputs[i] = h;
    const Matrix z = linear_forward(h, p.weights.at(name_ + "." + std::to_string(i) + ".w").values,
                                    {}, static_cast<std::size_t>(widths_[i]));
    cache.pre_act[i] = norms_[i].forward(p, z, ctx, cache.norms[i]);
    h = leaky_relu(cache.pre_act[i], ctx.slope);
  }
  return h;
}

Matrix PointMlp::backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                          const ForwardContext& ctx, TensorMap& grads) const {
  Matrix g = grad;
  for (std::size_t i = widths_.size(); i-- > 0;) {
    g = leaky_relu_backward(g, cache.pre_act[i], ctx.slope);
    g = norms_[i].backward(p, cache.norms[i], g, ctx.epsilon, grads);
    const std::string wname = name_ + "." + std::to_string(i) + ".w";
    g = linear_backward(cache.inputs[i], p.weights.at(wname).values, g, grad_span(grads, wname),
                        {});
  }
  return in_norm_.backward(p, cache.in_norm, g, ctx.epsilon, grads);
}

// --- PointRefine --------------------------------------------------------------

PointRefine::PointRefine(const std::string& name, int voxel_channels, int point_channels,
                         int classes)
    : name_(name),
      voxel_channels_(voxel_channels),
      point_channels_(point_channels),
      classes_(classes) {}

void PointRefine::declare(ModelParams& p, Rng& rng) const {
  const std::size_t in = static_cast<std::size_t>(voxel_channels_ + point_channels_);
  const std::size_t hidden = 2 * static_cast<std::size_t>(classes_);
  const std::size_t k = static_cast<std::size_t>(classes_);
  Tensor w1({in, hidden});
  init_linear(w1, in, hidden, rng);
  Tensor w2({hidden, k});
  init_linear(w2, hidden, k, rng);
  p.weights[name_ + ".fc1.w"] = std::move(w1);
  p.weights[name_ + ".fc1.b"] = Tensor({hidden});
  p.weights[name_ + ".fc2.w"] = std::move(w2);
  p.weights[name_ + ".fc2.b"] = Tensor({k});
}

Matrix PointRefine::forward(const ModelParams& p, const Matrix& voxel_features,
                            const Matrix& point_features, std::span<const int32_t> point_site,
                            const ForwardContext& ctx, Cache& cache) const {
  if (point_site.size() != point_features.rows ||
      static_cast<int>(voxel_features.cols) != voxel_channels_ ||
      static_cast<int>(point_features.cols) != point_channels_) {
    throw ShapeError("point refinement input mismatch");
  }
  cache.fused = Matrix(point_features.rows, voxel_channels_ + point_channels_);
  for (std::size_t i = 0; i < point_features.rows; ++i) {
    const auto v = voxel_features.row(static_cast<std::size_t>(point_site[i]));
    const auto pf = point_features.row(i);
    auto dst = cache.fused.row(i);
    std::copy(v.begin(), v.end(), dst.begin());
    std::copy(pf.begin(), pf.end(), dst.begin() + voxel_channels_);
  }
  cache.hidden_pre = linear_forward(cache.fused, p.weights.at(name_ + ".fc1.w").values,
                                    p.weights.at(name_ + ".fc1.b").values,
                                    2 * static_cast<std::size_t>(classes_));
  cache.hidden = leaky_relu(cache.hidden_pre, ctx.slope);
  return linear_forward(cache.hidden, p.weights.at(name_ + ".fc2.w").values,
                        p.weights.at(name_ + ".fc2.b").values,
                        static_cast<std::size_t>(classes_));
}

PointRefine::Grads PointRefine::backward(const ModelParams& p, const Cache& cache,
                                         const Matrix& grad, std::span<const int32_t> point_site,
                                         std::size_t num_sites, const ForwardContext& ctx,
                                         TensorMap& grads) const {
  Matrix gh = linear_backward(cache.hidden, p.weights.at(name_ + ".fc2.w").values, grad,
                              grad_span(grads, name_ + ".fc2.w"),
                              grad_span(grads, name_ + ".fc2.b"));
  gh = leaky_relu_backward(gh, cache.hidden_pre, ctx.slope);
  const Matrix gf = linear_backward(cache.fused, p.weights.at(name_ + ".fc1.w").values, gh,
                                    grad_span(grads, name_ + ".fc1.w"),
                                    grad_span(grads, name_ + ".fc1.b"));
  Grads out{Matrix(num_sites, voxel_channels_), Matrix(gf.rows, point_channels_)};
  for (std::size_t i = 0; i < gf.rows; ++i) {
    const auto src = gf.row(i);
    auto site = out.voxel.row(static_cast<std::size_t>(point_site[i]));
    for (int c = 0; c < voxel_channels_; ++c) site[c] += src[c];
    auto pt = out.point.row(i);
    for (int c = 0; c < point_channels_; ++c) pt[c] = src[voxel_channels_ + c];
  }
  return out;
}

// --- Features ---------------------------------------------------------------

Matrix point_input_features(const PointCloud& cloud, const VoxelMapping& mapping,
                            const CylGridSpec& grid, bool use_intensity) {
  if (mapping.num_points() != cloud.size()) {
    throw ShapeError("mapping does not belong to this cloud");
  }
  Matrix f(cloud.size(), 9);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.xyz[i];
    const CylPoint c = cart_to_cyl(p.x, p.y, p.z);
    const auto center = grid.cell_center(mapping.cells[mapping.point_cell[i]]);
    auto r = f.row(i);
    r[0] = c.rho - center[0];
    r[1] = c.theta - center[1];
    r[2] = c.z - center[2];
    r[3] = c.rho;
    r[4] = c.theta;
    r[5] = c.z;
    r[6] = p.x;
    r[7] = p.y;
    r[8] = use_intensity ? cloud.intensity[i] : 0.0;
  }
  return f;
}

// --- Network ------------------------------------------------------------------

Network::Network(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  const int c0 = config_.base_channels;
  const int s = config_.num_stages;
  std::vector<int> widths = config_.point_mlp_widths;
  widths.push_back(c0);
  mlp_ = PointMlp("mlp", 9, widths);
  for (int i = 0; i < s; ++i) {
    down_.emplace_back("enc" + std::to_string(i), config_.block_variant, c0 << i);
    up_.emplace_back("dec" + std::to_string(i), config_.block_variant, c0 << i);
  }
  ddcm_ = Ddcm("bottleneck.ddcm", c0 << s);
  head_ = ConvLayer{"head", {1, 1, 1}, c0, config_.num_classes, true};
  refine_ = PointRefine("refine", c0, c0, config_.num_classes);
}

ModelParams Network::init_params(uint64_t seed) const {
  ModelParams p;
  Rng rng(seed);
  mlp_.declare(p, rng);
  for (const auto& d : down_) d.declare(p, rng);
  ddcm_.declare(p, rng);
  for (const auto& u : up_) u.declare(p, rng);
  head_.declare(p, rng);
  refine_.declare(p, rng);
  return p;
}

ForwardResult Network::forward(const PointCloud& cloud, const ModelParams& params,
                               bool training, ForwardTrace* trace) const {
  return forward(cloud, assign_cells(cloud, config_.grid), params, training, trace);
}

ForwardResult Network::forward(const PointCloud& cloud, const VoxelMapping& mapping,
                               const ModelParams& params, bool training,
                               ForwardTrace* trace) const {
  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  tr = ForwardTrace{};
  tr.ctx = {training, config_.leaky_slope, config_.norm_epsilon, &tr.norm_updates};
  const ForwardContext& ctx = tr.ctx;
  const int s = config_.num_stages;

  tr.mapping = mapping;
  tr.num_points = cloud.size();
  const Matrix inputs = point_input_features(cloud, mapping, config_.grid, config_.use_intensity);
  tr.point_features = mlp_.forward(params, inputs, ctx, tr.mlp);
  SparseTensor x = scatter_features(tr.point_features, mapping, &tr.scatter_argmax);

  tr.books.push_back(std::make_shared<RulebookCache>(x.coords, x.spatial_shape));
  tr.down.resize(s);
  tr.up.resize(s);
  for (int i = 0; i < s; ++i) {
    DownBlock::Output o = down_[i].forward(params, x, *tr.books[i], ctx, tr.down[i]);
    x = std::move(o.out);
    tr.books.push_back(std::make_shared<RulebookCache>(x.coords, x.spatial_shape));
  }
  x = ddcm_.forward(params, x, *tr.books[s], ctx, tr.ddcm);
  for (int i = s - 1; i >= 0; --i) {
    x = up_[i].forward(params, x, tr.down[i].skip, tr.down[i].rulebook, *tr.books[i], ctx,
                       tr.up[i]);
  }
  tr.decoder_out = x;
  tr.head_rulebook = &tr.books[0]->submanifold({1, 1, 1});

  ForwardResult out;
  out.voxel_logits = sparse_conv_forward(x, head_.view(params), *tr.head_rulebook);
  out.point_logits = refine_.forward(params, x.features, tr.point_features, mapping.point_cell,
                                     ctx, tr.refine);
  tr.ctx.norm_log = nullptr;
  return out;
}

TensorMap Network::backward(const ModelParams& params, const ForwardTrace& tr,
                            const Matrix& grad_voxel_logits,
                            const Matrix& grad_point_logits) const {
  TensorMap grads = zeros_like(params.weights);
  const ForwardContext ctx{tr.ctx.training, tr.ctx.slope, tr.ctx.epsilon, nullptr};
  const int s = config_.num_stages;

  PointRefine::Grads rg = refine_.backward(params, tr.refine, grad_point_logits,
                                           tr.mapping.point_cell, tr.decoder_out.size(), ctx,
                                           grads);
  ConvGrads hg = sparse_conv_backward(tr.decoder_out, head_.view(params), *tr.head_rulebook,
                                      grad_voxel_logits);
  accumulate(grads, "head.w", hg.grad_weights);
  accumulate(grads, "head.b", hg.grad_bias);
  Matrix gx = std::move(hg.grad_input);
  add_into(gx, rg.voxel);

  std::vector<Matrix> grad_skip(s);
  for (int i = 0; i < s; ++i) {
    UpBlock::Grads ug = up_[i].backward(params, tr.up[i], gx, ctx, grads);
    grad_skip[i] = std::move(ug.skip);
    gx = std::move(ug.input);
  }
  gx = ddcm_.backward(params, tr.ddcm, gx, ctx, grads);
  for (int i = s - 1; i >= 0; --i) {
    gx = down_[i].backward(params, tr.down[i], gx, grad_skip[i], ctx, grads);
  }
  Matrix gpoint = scatter_features_backward(gx, tr.scatter_argmax, tr.num_points);
  add_into(gpoint, rg.point);
  mlp_.backward(params, tr.mlp, gpoint, ctx, grads);
  return grads;
}

void Network::commit_running_stats(ModelParams& params, const ForwardTrace& trace) const {
  const double m = config_.norm_momentum;
  for (const auto& u : trace.norm_updates) {
    auto& mean = params.buffers.at(u.name + ".running_mean").values;
    auto& var = params.buffers.at(u.name + ".running_var").values;
    for (std::size_t k = 0; k < mean.size(); ++k) {
      mean[k] = m * mean[k] + (1.0 - m) * u.batch_mean[k];
      var[k] = m * var[k] + (1.0 - m) * u.batch_var[k];
    }
  }
}

std::size_t Network::conv_weight_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : init_params(0).weights) {
    if (t.shape.size() == 3) n += t.size();
  }
  return n;
}

std::vector<int32_t> predict_labels(const Matrix& logits) {
  std::vector<int32_t> out(logits.rows, 0);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto row = logits.row(r);
    out[r] = static_cast<int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace cylseg
