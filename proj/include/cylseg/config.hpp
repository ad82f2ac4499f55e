#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cylseg/network.hpp"
#include "cylseg/partition.hpp"
#include "cylseg/pointcloud.hpp"
#include "cylseg/train.hpp"

namespace cylseg {

// `[section]` headers and `key = value` lines; `#` and `;` start comments.
// Keys before the first header belong to section "". Duplicate keys throw.
struct IniFile {
  struct Entry {
    std::string value;
    int line = 0;
  };
  std::map<std::string, std::map<std::string, Entry>> sections;

  static IniFile parse(const std::string& text);
};

// Where scans come from. With empty scan directories the split is generated
// synthetically (synthetic_* keys).
struct DataConfig {
  std::filesystem::path train_scans, train_labels;
  std::filesystem::path val_scans, val_labels;
  int synthetic_train = 20;
  int synthetic_val = 5;
  int synthetic_points = 6000;
  uint64_t synthetic_seed = 0;
};

struct StatsConfig {
  CubicGridSpec cubic;
  std::vector<double> distance_edges{0, 10, 20, 30, 40, 50};
};

struct RunConfig {
  uint64_t seed = 0;
  int threads = 1;
  NetworkConfig network;
  LabelMap label_map;
  std::vector<std::string> class_names;  // empty or one per class
  TrainOptions train;
  DataConfig data;
  StatsConfig stats;

  // Unknown sections or keys and malformed values throw ConfigError naming
  // the line.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

// Sorted *.bin files of a directory; labels are `<labels_dir>/<stem>.label`
// when labels_dir is non-empty.
struct ScanFile {
  std::filesystem::path scan;
  std::filesystem::path label;  // empty when unlabeled
};
std::vector<ScanFile> list_scans(const std::filesystem::path& scans_dir,
                                 const std::filesystem::path& labels_dir);
PointCloud load_scan(const ScanFile& f, const LabelMap& label_map);

// Scenes seed, seed+1, ... with the configured point count.
std::vector<PointCloud> synthetic_split(int count, int points, uint64_t seed);

}  // namespace cylseg
