#include "cylseg/train.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>

#include "cylseg/checkpoint.hpp"
#include "cylseg/random.hpp"

namespace cylseg {

std::vector<uint64_t> label_counts(std::span<const PointCloud> clouds, int num_classes,
                                   int32_t ignore_id) {
  std::vector<uint64_t> counts(num_classes, 0);
  for (const auto& c : clouds) {
    if (!c.labels) throw Error("training cloud has no labels");
    for (int32_t l : *c.labels) {
      if (l == ignore_id) continue;
      if (l < 0 || l >= num_classes) throw ShapeError("label id out of range");
      ++counts[l];
    }
  }
  return counts;
}

StepResult loss_and_gradients(const Network& net, const ModelParams& params,
                              const PointCloud& cloud, std::span<const double> class_weights,
                              const LossWeights& loss_weights, int32_t ignore_id) {
  if (!cloud.labels) throw Error("cloud has no labels");
  StepResult s;
  const VoxelMapping mapping = assign_cells(cloud, net.config().grid);
  const auto voxel_targets = encode_cell_labels(mapping, *cloud.labels, LabelEncoding::majority,
                                                net.config().num_classes, ignore_id);
  const ForwardResult r = net.forward(cloud, mapping, params, true, &s.trace);
  s.loss = total_loss(r.voxel_logits.features, voxel_targets, r.point_logits, *cloud.labels,
                      class_weights, ignore_id, loss_weights);
  s.grads = net.backward(params, s.trace, s.loss.grad_voxel_logits, s.loss.grad_point_logits);
  return s;
}

TrainResult train_loop(const NetworkConfig& config, std::span<const PointCloud> train,
                       std::span<const PointCloud> validation, const TrainOptions& options,
                       const std::function<void(const EpochMetrics&)>& on_epoch) {
  if (train.empty()) throw Error("training set is empty");
  if (options.epochs < 1) throw ConfigError("epochs must be >= 1");
  for (const auto& c : train) c.validate(config.num_classes, options.ignore_id);

  const Network net(config);
  TrainResult result;
  result.params = net.init_params(options.seed);
  result.class_weights = class_weights_from_counts(
      label_counts(train, config.num_classes, options.ignore_id));
  AdamState adam{options.adam, {}, {}, 0};
  Rng rng(options.seed ^ 0x5eed5eed5eed5eedULL);

  std::vector<std::size_t> order(train.size());
  int iteration = 0;
  bool done = false;
  for (int epoch = 1; epoch <= options.epochs && !done; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (options.shuffle) {
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    int steps = 0;
    for (std::size_t idx : order) {
      StepResult s = loss_and_gradients(net, result.params, train[idx], result.class_weights,
                                        options.loss_weights, options.ignore_id);
      adam_step(result.params.weights, s.grads, adam);
      net.commit_running_stats(result.params, s.trace);
      const LossReport& r = s.loss.report;
      result.iteration_losses.push_back(r);
      m.mean_loss.l_voxel_ce += r.l_voxel_ce;
      m.mean_loss.l_voxel_lovasz += r.l_voxel_lovasz;
      m.mean_loss.l_point_ce += r.l_point_ce;
      m.mean_loss.total += r.total;
      ++steps;
      ++iteration;
      if (options.max_iterations > 0 && iteration >= options.max_iterations) {
        done = true;
        break;
      }
    }
    m.mean_loss.l_voxel_ce /= steps;
    m.mean_loss.l_voxel_lovasz /= steps;
    m.mean_loss.l_point_ce /= steps;
    m.mean_loss.total /= steps;
    if (!validation.empty()) {
      m.val_miou = compute_miou(evaluate(net, result.params, validation, options.ignore_id)).miou;
    }
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

std::vector<int32_t> predict_points(const Network& net, const ModelParams& params,
                                    const PointCloud& cloud) {
  return predict_labels(net.forward(cloud, params, false).point_logits);
}

ConfusionMatrix evaluate(const Network& net, const ModelParams& params,
                         std::span<const PointCloud> clouds, int32_t ignore_id) {
  ConfusionMatrix cm(net.config().num_classes, ignore_id);
  for (const auto& c : clouds) {
    if (!c.labels) throw Error("evaluation cloud has no labels");
    cm.update(*c.labels, predict_points(net, params, c));
  }
  return cm;
}

void write_metrics_header(std::ostream& out) {
  out << "epoch,l_voxel_ce,l_voxel_lovasz,l_point_ce,total,val_miou\n";
}

void write_metrics_row(std::ostream& out, const EpochMetrics& m) {
  out << m.epoch << std::setprecision(10) << ',' << m.mean_loss.l_voxel_ce << ','
      << m.mean_loss.l_voxel_lovasz << ',' << m.mean_loss.l_point_ce << ','
      << m.mean_loss.total << ',';
  if (m.val_miou) out << *m.val_miou;
  out << '\n';
}

namespace {

constexpr const char* kWeightsPrefix = "weights/";
constexpr const char* kBuffersPrefix = "buffers/";

void check_against(const TensorMap& expected, const TensorMap& got, const char* what) {
  for (const auto& [name, t] : expected) {
    const auto it = got.find(name);
    if (it == got.end()) throw FormatError(std::string("checkpoint misses ") + what + " " + name);
    if (it->second.shape != t.shape) {
      throw FormatError("checkpoint tensor " + name + " has the wrong shape");
    }
  }
  for (const auto& [name, t] : got) {
    if (!expected.count(name)) throw FormatError("unexpected checkpoint tensor " + name);
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  TensorFile f;
  f.header = ckpt.config.to_text();
  for (const auto& [name, t] : ckpt.params.weights) f.tensors[kWeightsPrefix + name] = t;
  for (const auto& [name, t] : ckpt.params.buffers) f.tensors[kBuffersPrefix + name] = t;
  save_tensor_file(path, f);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  TensorFile f = load_tensor_file(path);
  Checkpoint ckpt;
  try {
    ckpt.config = NetworkConfig::from_text(f.header);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  const std::string wp = kWeightsPrefix;
  const std::string bp = kBuffersPrefix;
  for (auto& [name, t] : f.tensors) {
    if (name.starts_with(wp)) {
      ckpt.params.weights[name.substr(wp.size())] = std::move(t);
    } else if (name.starts_with(bp)) {
      ckpt.params.buffers[name.substr(bp.size())] = std::move(t);
    } else {
      throw FormatError("unexpected checkpoint tensor " + name);
    }
  }
  const ModelParams ref = Network(ckpt.config).init_params(0);
  check_against(ref.weights, ckpt.params.weights, "weight");
  check_against(ref.buffers, ckpt.params.buffers, "buffer");
  return ckpt;
}

}  // namespace cylseg
