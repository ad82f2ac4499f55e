#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "cylseg/common.hpp"

namespace cylseg {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  bool operator==(const Point3&) const = default;
};

// Raw LiDAR scan. `labels` holds training ids (or the ignore id) when present.
struct PointCloud {
  std::vector<Point3> xyz;
  std::vector<double> intensity;
  std::optional<std::vector<int32_t>> labels;

  std::size_t size() const { return xyz.size(); }
  bool has_labels() const { return labels.has_value(); }

  // Throws ShapeError when lengths disagree or values are non-finite.
  void validate(int num_classes = -1, int32_t ignore_id = -1) const;

  // Returns the cloud with points reordered: out[i] = this[order[i]].
  PointCloud permuted(std::span<const std::size_t> order) const;
};

// Raw dataset id -> training id. Unknown raw ids map to the ignore id.
struct LabelMap {
  std::map<uint32_t, int32_t> raw_to_train;
  // Explicit train id -> raw id used when writing predictions. Entries missing
  // here fall back to the smallest raw id that maps to the train id.
  std::map<int32_t, uint32_t> train_to_raw;
  int num_classes = 0;
  int32_t ignore_id = 255;

  int32_t to_train(uint32_t raw) const;
  uint32_t to_raw(int32_t train) const;
  void validate() const;

  // raw i -> train i for i in [0, k).
  static LabelMap identity(int k, int32_t ignore_id = 255);
  // The 19-class SemanticKITTI training map (raw 0 / unknown -> ignore).
  static LabelMap semantic_kitti();
};

// Synthetic driving-like scene: a ground plane plus pole and box obstacles.
// Classes are fixed: ground = 0, pole = 1, box = 2.
struct SyntheticSceneSpec {
  uint64_t seed = 0;
  int num_points = 6000;
  double max_range = 50.0;
  double min_range = 2.0;
  double ground_z = -1.7;
  double ground_noise = 0.03;
  // Ground extent is the annulus [min_range, max_range].
  int num_poles = 8;
  double pole_height = 4.5;
  double pole_radius = 0.25;
  int num_boxes = 8;
  double box_length = 4.2;
  double box_width = 1.8;
  double box_height = 1.5;
  // Share of points emitted on objects; the rest fall on the ground.
  double pole_fraction = 0.12;
  double box_fraction = 0.28;

  void validate() const;
};

inline constexpr int32_t kGroundClass = 0;
inline constexpr int32_t kPoleClass = 1;
inline constexpr int32_t kBoxClass = 2;
inline constexpr int kSyntheticClasses = 3;

PointCloud read_kitti_bin(const std::filesystem::path& path);
void write_kitti_bin(const std::filesystem::path& path, const PointCloud& cloud);

// Decodes u32 records; the lower 16 bits are the raw semantic id.
std::vector<int32_t> read_kitti_labels(const std::filesystem::path& path,
                                       const LabelMap& label_map);
// Writes one u32 per label: the raw id via label_map.to_raw, upper bits zero.
void write_kitti_labels(const std::filesystem::path& path,
                        std::span<const int32_t> train_labels,
                        const LabelMap& label_map);

PointCloud generate_synthetic_scene(const SyntheticSceneSpec& spec);

}  // namespace cylseg
