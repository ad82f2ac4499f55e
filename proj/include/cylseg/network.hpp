#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cylseg/common.hpp"
#include "cylseg/partition.hpp"
#include "cylseg/pointcloud.hpp"
#include "cylseg/random.hpp"
#include "cylseg/sparse_ops.hpp"
#include "cylseg/sparse_tensor.hpp"

namespace cylseg {

enum class BlockVariant { regular, asym1d, asym };

std::string to_string(BlockVariant v);
BlockVariant block_variant_from_string(const std::string& s);

struct NetworkConfig {
  int num_classes = 3;
  int base_channels = 8;
  int num_stages = 2;
  // Hidden widths of the point MLP; a final layer of width base_channels is
  // always appended.
  std::vector<int> point_mlp_widths{16};
  BlockVariant block_variant = BlockVariant::asym;
  CylGridSpec grid;
  double leaky_slope = 0.1;
  double norm_epsilon = 1e-5;
  double norm_momentum = 0.99;
  // When false the intensity input column is zero.
  bool use_intensity = true;

  void validate() const;
  // `key = value` lines; the textual header stored in checkpoints.
  std::string to_text() const;
  static NetworkConfig from_text(const std::string& text);

  bool operator==(const NetworkConfig&) const = default;
};

// Trainable tensors and normalization running statistics, keyed by stable
// layer names (e.g. "enc0.res.a1.conv.w", "enc0.res.a1.norm.running_mean").
struct ModelParams {
  TensorMap weights;
  TensorMap buffers;

  bool operator==(const ModelParams&) const = default;
};

// Batch statistics recorded by training-mode normalization layers.
struct NormUpdate {
  std::string name;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
};

struct ForwardContext {
  bool training = false;
  double slope = 0.1;
  double epsilon = 1e-5;
  std::vector<NormUpdate>* norm_log = nullptr;
};

// Lazily built submanifold rulebooks for one coordinate set.
class RulebookCache {
 public:
  RulebookCache(std::vector<Coord3> coords, Shape3 shape)
      : coords_(std::move(coords)), shape_(shape) {}
  const Rulebook& submanifold(Shape3 kernel_size);
  const std::vector<Coord3>& coords() const { return coords_; }
  Shape3 shape() const { return shape_; }

 private:
  std::vector<Coord3> coords_;
  Shape3 shape_;
  std::map<Shape3, Rulebook> books_;
};

// ---------------------------------------------------------------------------
// Layers. Each declares its tensors into ModelParams, runs forward into a
// cache, and accumulates parameter gradients into a TensorMap shaped like
// ModelParams::weights during backward.

struct ConvLayer {
  std::string name;
  Shape3 kernel{1, 1, 1};
  int in = 0;
  int out = 0;
  bool bias = true;

  void declare(ModelParams& p, Rng& rng) const;
  ConvWeightsView view(const ModelParams& p) const;
  std::size_t num_weights() const;
};

struct NormLayer {
  std::string name;
  int channels = 0;
  // Non-affine layers only standardize and own no trainable tensors.
  bool affine = true;
  std::vector<double> unit_scale{};
  std::vector<double> zero_shift{};

  static NormLayer standardize(const std::string& name, int channels);

  void declare(ModelParams& p) const;
  NormView view(const ModelParams& p, double epsilon) const;
  Matrix forward(const ModelParams& p, const Matrix& x, const ForwardContext& ctx,
                 NormCache& cache) const;
  Matrix backward(const ModelParams& p, const NormCache& cache, const Matrix& grad,
                  double epsilon, TensorMap& grads) const;
};

// Submanifold conv followed by normalization.
struct ConvNorm {
  ConvLayer conv;
  NormLayer norm;

  struct Cache {
    SparseTensor input;
    const Rulebook* rulebook = nullptr;
    NormCache norm;
  };

  ConvNorm() = default;
  ConvNorm(const std::string& name, Shape3 kernel, int in, int out);
  void declare(ModelParams& p, Rng& rng) const;
  SparseTensor forward(const ModelParams& p, const SparseTensor& x, RulebookCache& books,
                       const ForwardContext& ctx, Cache& cache) const;
  Matrix backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                  const ForwardContext& ctx, TensorMap& grads) const;
};

// Residual block in one of three variants:
//   asym    branch A = (1,3,3) -> (3,1,3), branch B = (3,1,3) -> (1,3,3);
//   asym1d  branch A = (1,3,1) -> (3,1,1), branch B = (3,1,1) -> (1,3,1);
//           both: out = act(A + B), each conv followed by normalization and
//           the first one by the activation;
//   regular two 3x3x3 convs with an identity shortcut (1x1x1 conv + norm
//           when widths differ): out = act(main + shortcut).
// Kernel axes are (radius, azimuth, height).
class ResBlock {
 public:
  struct Cache {
    ConvNorm::Cache c[4];
    Matrix pre_a;  // branch A (or main path) first activation input
    Matrix pre_b;  // branch B first activation input
    Matrix pre_out;
  };

  ResBlock() = default;
  ResBlock(std::string name, BlockVariant variant, int in, int out);

  void declare(ModelParams& p, Rng& rng) const;
  SparseTensor forward(const ModelParams& p, const SparseTensor& x, RulebookCache& books,
                       const ForwardContext& ctx, Cache& cache) const;
  Matrix backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                  const ForwardContext& ctx, TensorMap& grads) const;

  // Convolution weights only (no bias or normalization parameters).
  std::size_t conv_weight_count() const;
  BlockVariant variant() const { return variant_; }

 private:
  std::string name_;
  BlockVariant variant_ = BlockVariant::asym;
  int in_ = 0;
  int out_ = 0;
  ConvNorm convs_[4];
  bool projected_ = false;  // regular variant with in != out
};

// Res block at width C then a strided 3x3x3 stride-2 conv to 2C.
class DownBlock {
 public:
  struct Cache {
    ResBlock::Cache res;
    SparseTensor skip;
    std::shared_ptr<const Rulebook> rulebook;
  };
  struct Output {
    SparseTensor out;
    SparseTensor skip;
    std::shared_ptr<const Rulebook> rulebook;
  };

  DownBlock() = default;
  DownBlock(const std::string& name, BlockVariant variant, int channels);
  void declare(ModelParams& p, Rng& rng) const;
  Output forward(const ModelParams& p, const SparseTensor& x, RulebookCache& books,
                 const ForwardContext& ctx, Cache& cache) const;
  // grad_skip is the gradient flowing back from the paired up block.
  Matrix backward(const ModelParams& p, const Cache& cache, const Matrix& grad_out,
                  const Matrix& grad_skip, const ForwardContext& ctx, TensorMap& grads) const;

  const ResBlock& res() const { return res_; }

 private:
  ResBlock res_;
  ConvLayer down_;
};

// Inverse conv (2C -> C) restoring the stored fine sites, norm + act,
// concatenation with the skip features, then a res block 2C -> C.
class UpBlock {
 public:
  struct Cache {
    SparseTensor input;
    std::shared_ptr<const Rulebook> rulebook;
    NormCache norm;
    Matrix pre_act;
    ResBlock::Cache fuse;
  };
  struct Grads {
    Matrix input;
    Matrix skip;
  };

  UpBlock() = default;
  UpBlock(const std::string& name, BlockVariant variant, int channels);
  void declare(ModelParams& p, Rng& rng) const;
  SparseTensor forward(const ModelParams& p, const SparseTensor& x, const SparseTensor& skip,
                       std::shared_ptr<const Rulebook> stored, RulebookCache& skip_books,
                       const ForwardContext& ctx, Cache& cache) const;
  Grads backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                 const ForwardContext& ctx, TensorMap& grads) const;

 private:
  int channels_ = 0;
  ConvLayer up_;
  NormLayer norm_;
  ResBlock fuse_;
};

// Three rank-1 gates: out = x * (sig(norm(conv_h x)) + sig(norm(conv_w x)) +
// sig(norm(conv_l x))) with kernels (3,1,1), (1,3,1), (1,1,3).
class Ddcm {
 public:
  struct Cache {
    SparseTensor input;
    ConvNorm::Cache c[3];
    Matrix gate[3];
  };

  Ddcm() = default;
  Ddcm(const std::string& name, int channels);
  void declare(ModelParams& p, Rng& rng) const;
  SparseTensor forward(const ModelParams& p, const SparseTensor& x, RulebookCache& books,
                       const ForwardContext& ctx, Cache& cache) const;
  Matrix backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                  const ForwardContext& ctx, TensorMap& grads) const;

 private:
  ConvNorm gates_[3];
};

// Per-point MLP: input standardization (no affine), then Linear -> norm ->
// LeakyReLU per layer.
class PointMlp {
 public:
  struct Cache {
    NormCache in_norm;
    std::vector<Matrix> inputs;  // input of each linear layer
    std::vector<NormCache> norms;
    std::vector<Matrix> pre_act;
  };

  PointMlp() = default;
  PointMlp(const std::string& name, int in, std::vector<int> widths);
  void declare(ModelParams& p, Rng& rng) const;
  Matrix forward(const ModelParams& p, const Matrix& x, const ForwardContext& ctx,
                 Cache& cache) const;
  Matrix backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                  const ForwardContext& ctx, TensorMap& grads) const;
  int out_width() const { return widths_.back(); }

 private:
  std::string name_;
  int in_ = 0;
  std::vector<int> widths_;
  NormLayer in_norm_;
  std::vector<NormLayer> norms_;
};

// Gathers each point's voxel feature through the mapping, concatenates the
// point's MLP feature and applies Linear(2K) -> LeakyReLU -> Linear(K).
class PointRefine {
 public:
  struct Cache {
    Matrix fused;
    Matrix hidden_pre;
    Matrix hidden;
  };
  struct Grads {
    Matrix voxel;  // per site
    Matrix point;  // per point
  };

  PointRefine() = default;
  PointRefine(const std::string& name, int voxel_channels, int point_channels, int classes);
  void declare(ModelParams& p, Rng& rng) const;
  Matrix forward(const ModelParams& p, const Matrix& voxel_features,
                 const Matrix& point_features, std::span<const int32_t> point_site,
                 const ForwardContext& ctx, Cache& cache) const;
  Grads backward(const ModelParams& p, const Cache& cache, const Matrix& grad,
                 std::span<const int32_t> point_site, std::size_t num_sites,
                 const ForwardContext& ctx, TensorMap& grads) const;

 private:
  std::string name_;
  int voxel_channels_ = 0;
  int point_channels_ = 0;
  int classes_ = 0;
};

// Per point: [rho - rho_c, theta - theta_c, z - z_c, rho, theta, z, x, y,
// intensity] with (rho_c, theta_c, z_c) the center of the point's cell.
Matrix point_input_features(const PointCloud& cloud, const VoxelMapping& mapping,
                            const CylGridSpec& grid, bool use_intensity = true);

struct ForwardResult {
  SparseTensor voxel_logits;  // sites = occupied cells in mapping order
  Matrix point_logits;        // N x K
};

struct ForwardTrace {
  ForwardContext ctx;
  std::vector<NormUpdate> norm_updates;
  VoxelMapping mapping;
  std::size_t num_points = 0;
  PointMlp::Cache mlp;
  Matrix point_features;
  std::vector<int32_t> scatter_argmax;
  std::vector<std::shared_ptr<RulebookCache>> books;  // per stage
  std::vector<DownBlock::Cache> down;
  Ddcm::Cache ddcm;
  std::vector<UpBlock::Cache> up;  // index = stage
  SparseTensor decoder_out;
  const Rulebook* head_rulebook = nullptr;
  PointRefine::Cache refine;
};

// point MLP -> max scatter -> S down blocks -> DDCM -> S up blocks -> 1x1x1
// logits head, plus the point-wise refinement head.
class Network {
 public:
  explicit Network(NetworkConfig config);

  const NetworkConfig& config() const { return config_; }
  ModelParams init_params(uint64_t seed) const;

  ForwardResult forward(const PointCloud& cloud, const ModelParams& params, bool training,
                        ForwardTrace* trace = nullptr) const;
  // Forward on a precomputed mapping (must come from `cloud` and the config grid).
  ForwardResult forward(const PointCloud& cloud, const VoxelMapping& mapping,
                        const ModelParams& params, bool training,
                        ForwardTrace* trace = nullptr) const;

  // Gradients of sum(grad_voxel * voxel_logits) + sum(grad_point * point_logits)
  // with respect to every trainable tensor.
  TensorMap backward(const ModelParams& params, const ForwardTrace& trace,
                     const Matrix& grad_voxel_logits, const Matrix& grad_point_logits) const;

  // Folds the batch statistics of a training forward into running averages.
  void commit_running_stats(ModelParams& params, const ForwardTrace& trace) const;

  std::size_t conv_weight_count() const;

 private:
  NetworkConfig config_;
  PointMlp mlp_;
  std::vector<DownBlock> down_;
  Ddcm ddcm_;
  std::vector<UpBlock> up_;
  ConvLayer head_;
  PointRefine refine_;
};

// Argmax per row.
std::vector<int32_t> predict_labels(const Matrix& logits);

}  // namespace cylseg
