#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "cylseg/losses.hpp"
#include "cylseg/metrics.hpp"
#include "cylseg/network.hpp"
#include "cylseg/optim.hpp"
#include "cylseg/pointcloud.hpp"

namespace cylseg {

struct TrainOptions {
  int epochs = 10;
  uint64_t seed = 0;
  // Stop after this many optimizer steps (one scene per step); <= 0 = no cap.
  int max_iterations = 0;
  bool shuffle = true;
  AdamOptions adam;
  LossWeights loss_weights;
  int32_t ignore_id = 255;
};

struct EpochMetrics {
  int epoch = 0;  // 1-based
  LossReport mean_loss;
  std::optional<double> val_miou;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> class_weights;
  std::vector<LossReport> iteration_losses;
  std::vector<EpochMetrics> epochs;
};

// Per-class point counts over labeled clouds, ignore ids skipped.
std::vector<uint64_t> label_counts(std::span<const PointCloud> clouds, int num_classes,
                                   int32_t ignore_id);

// One forward + loss + backward on a labeled cloud.
struct StepResult {
  TotalLoss loss;
  TensorMap grads;
  ForwardTrace trace;
};
StepResult loss_and_gradients(const Network& net, const ModelParams& params,
                              const PointCloud& cloud, std::span<const double> class_weights,
                              const LossWeights& loss_weights, int32_t ignore_id);

// Trains from init_params(seed). Class weights come from the training split.
// Deterministic given (config, clouds, options).
TrainResult train_loop(const NetworkConfig& config, std::span<const PointCloud> train,
                       std::span<const PointCloud> validation, const TrainOptions& options,
                       const std::function<void(const EpochMetrics&)>& on_epoch = {});

// Inference-mode point predictions (train ids).
std::vector<int32_t> predict_points(const Network& net, const ModelParams& params,
                                    const PointCloud& cloud);

// Point-level confusion over labeled clouds with inference-mode predictions.
ConfusionMatrix evaluate(const Network& net, const ModelParams& params,
                         std::span<const PointCloud> clouds, int32_t ignore_id = 255);

// `epoch,l_voxel_ce,l_voxel_lovasz,l_point_ce,total,val_miou`; an undefined
// validation mIoU is written as an empty field.
void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const EpochMetrics& m);

struct Checkpoint {
  NetworkConfig config;
  ModelParams params;
};

// Tensors are stored as "weights/<name>" and "buffers/<name>"; the header is
// NetworkConfig::to_text().
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Validates every tensor name and shape against the network the header
// describes.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cylseg
