#include "cylseg/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace cylseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string where(const IniFile::Entry& e) { return " (line " + std::to_string(e.line) + ")"; }

template <typename T>
T parse_number(const std::string& key, const IniFile::Entry& e) {
  std::istringstream in(e.value);
  T v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof()) {
    throw ConfigError("bad value for '" + key + "': '" + e.value + "'" + where(e));
  }
  return v;
}

bool parse_bool(const std::string& key, const IniFile::Entry& e) {
  if (e.value == "true" || e.value == "1" || e.value == "yes") return true;
  if (e.value == "false" || e.value == "0" || e.value == "no") return false;
  throw ConfigError("bad boolean for '" + key + "': '" + e.value + "'" + where(e));
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const IniFile::Entry& e) {
  std::vector<T> out;
  std::stringstream ss(e.value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(parse_number<T>(key, {trim(item), e.line}));
  }
  return out;
}

std::vector<std::string> parse_names(const IniFile::Entry& e) {
  std::vector<std::string> out;
  std::stringstream ss(e.value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

Shape3 parse_shape(const std::string& key, const IniFile::Entry& e) {
  const auto v = parse_list<int>(key, e);
  if (v.size() != 3) throw ConfigError("'" + key + "' needs three integers" + where(e));
  return {v[0], v[1], v[2]};
}

// Typed access to one section; every key must be consumed.
class Section {
 public:
  Section(const IniFile& ini, const std::string& name) : name_(name) {
    const auto it = ini.sections.find(name);
    if (it != ini.sections.end()) entries_ = &it->second;
  }

  template <typename F>
  void get(const std::string& key, F&& assign) {
    if (!entries_) return;
    const auto it = entries_->find(key);
    if (it == entries_->end()) return;
    used_.insert(key);
    assign(key, it->second);
  }

  void finish() const {
    if (!entries_) return;
    for (const auto& [key, e] : *entries_) {
      if (!used_.count(key)) {
        throw ConfigError("unknown key '" + key + "' in section [" + name_ + "]" + where(e));
      }
    }
  }

 private:
  std::string name_;
  const std::map<std::string, IniFile::Entry>* entries_ = nullptr;
  std::set<std::string> used_;
};

LabelMap parse_label_map(const IniFile& ini, std::vector<std::string>& names) {
  std::string preset;
  int num_classes = -1;
  int ignore_id = 255;
  Section s(ini, "labels");
  s.get("preset", [&](auto&, auto& e) { preset = e.value; });
  s.get("num_classes", [&](auto& k, auto& e) { num_classes = parse_number<int>(k, e); });
  s.get("ignore_id", [&](auto& k, auto& e) { ignore_id = parse_number<int>(k, e); });
  s.get("names", [&](auto&, auto& e) { names = parse_names(e); });
  s.finish();

  const bool has_map = ini.sections.count("label_map") > 0;
  if (preset.empty()) preset = has_map ? "custom" : "identity";

  LabelMap m;
  if (preset == "semantic_kitti") {
    m = LabelMap::semantic_kitti();
    if (num_classes != -1 && num_classes != m.num_classes) {
      throw ConfigError("semantic_kitti preset has 19 classes");
    }
    if (ignore_id != m.ignore_id) {
      for (auto& [raw, t] : m.raw_to_train) {
        if (t == m.ignore_id) t = ignore_id;
      }
      m.ignore_id = ignore_id;
    }
    if (names.empty()) {
      names = {"car",        "bicycle",      "motorcycle", "truck",   "other-vehicle",
               "person",     "bicyclist",    "motorcyclist", "road",  "parking",
               "sidewalk",   "other-ground", "building",   "fence",   "vegetation",
               "trunk",      "terrain",      "pole",       "traffic-sign"};
    }
  } else if (preset == "identity") {
    m = LabelMap::identity(num_classes == -1 ? kSyntheticClasses : num_classes, ignore_id);
  } else if (preset == "custom") {
    if (num_classes == -1) throw ConfigError("[labels] num_classes is required for a custom map");
    m.num_classes = num_classes;
    m.ignore_id = ignore_id;
  } else {
    throw ConfigError("unknown label preset '" + preset +
                      "' (identity|semantic_kitti|custom)");
  }

  if (const auto it = ini.sections.find("label_map"); it != ini.sections.end()) {
    for (const auto& [key, e] : it->second) {
      m.raw_to_train[parse_number<uint32_t>(key, {key, e.line})] = parse_number<int32_t>(key, e);
    }
  }
  if (const auto it = ini.sections.find("label_map_inverse"); it != ini.sections.end()) {
    for (const auto& [key, e] : it->second) {
      m.train_to_raw[parse_number<int32_t>(key, {key, e.line})] = parse_number<uint32_t>(key, e);
    }
  }
  m.validate();
  if (!names.empty() && static_cast<int>(names.size()) != m.num_classes) {
    throw ConfigError("[labels] names must list one name per class");
  }
  return m;
}

}  // namespace

IniFile IniFile::parse(const std::string& text) {
  IniFile ini;
  std::string section;
  ini.sections[section];
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find_first_of("#;");
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError("malformed section header on line " + std::to_string(line_no));
      }
      section = trim(line.substr(1, line.size() - 2));
      ini.sections[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("expected 'key = value' on line " + std::to_string(line_no));
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key on line " + std::to_string(line_no));
    if (!ini.sections[section].emplace(key, Entry{trim(line.substr(eq + 1)), line_no}).second) {
      throw ConfigError("duplicate key '" + key + "' on line " + std::to_string(line_no));
    }
  }
  return ini;
}

RunConfig RunConfig::parse(const std::string& text) {
  const IniFile ini = IniFile::parse(text);
  static const std::set<std::string> known{"",      "grid", "network", "labels", "label_map",
                                           "label_map_inverse", "train", "data", "stats"};
  for (const auto& [name, entries] : ini.sections) {
    if (!known.count(name)) throw ConfigError("unknown section [" + name + "]");
  }

  RunConfig c;
  Section top(ini, "");
  top.get("seed", [&](auto& k, auto& e) { c.seed = parse_number<uint64_t>(k, e); });
  top.get("threads", [&](auto& k, auto& e) { c.threads = parse_number<int>(k, e); });
  top.finish();
  if (c.threads < 1) throw ConfigError("threads must be >= 1");

  CylGridSpec& g = c.network.grid;
  Section grid(ini, "grid");
  grid.get("rho_min", [&](auto& k, auto& e) { g.rho_min = parse_number<double>(k, e); });
  grid.get("rho_max", [&](auto& k, auto& e) { g.rho_max = parse_number<double>(k, e); });
  grid.get("z_min", [&](auto& k, auto& e) { g.z_min = parse_number<double>(k, e); });
  grid.get("z_max", [&](auto& k, auto& e) { g.z_max = parse_number<double>(k, e); });
  grid.get("resolution", [&](auto& k, auto& e) { g.resolution = parse_shape(k, e); });
  grid.finish();

  NetworkConfig& n = c.network;
  Section net(ini, "network");
  net.get("base_channels", [&](auto& k, auto& e) { n.base_channels = parse_number<int>(k, e); });
  net.get("num_stages", [&](auto& k, auto& e) { n.num_stages = parse_number<int>(k, e); });
  net.get("point_mlp_widths",
          [&](auto& k, auto& e) { n.point_mlp_widths = parse_list<int>(k, e); });
  net.get("block_variant",
          [&](auto&, auto& e) { n.block_variant = block_variant_from_string(e.value); });
  net.get("leaky_slope", [&](auto& k, auto& e) { n.leaky_slope = parse_number<double>(k, e); });
  net.get("norm_epsilon", [&](auto& k, auto& e) { n.norm_epsilon = parse_number<double>(k, e); });
  net.get("norm_momentum",
          [&](auto& k, auto& e) { n.norm_momentum = parse_number<double>(k, e); });
  net.get("use_intensity", [&](auto& k, auto& e) { n.use_intensity = parse_bool(k, e); });
  net.finish();

  c.label_map = parse_label_map(ini, c.class_names);
  n.num_classes = c.label_map.num_classes;
  n.validate();

  TrainOptions& t = c.train;
  Section train(ini, "train");
  train.get("epochs", [&](auto& k, auto& e) { t.epochs = parse_number<int>(k, e); });
  train.get("max_iterations",
            [&](auto& k, auto& e) { t.max_iterations = parse_number<int>(k, e); });
  train.get("shuffle", [&](auto& k, auto& e) { t.shuffle = parse_bool(k, e); });
  train.get("lr", [&](auto& k, auto& e) { t.adam.lr = parse_number<double>(k, e); });
  train.get("beta1", [&](auto& k, auto& e) { t.adam.beta1 = parse_number<double>(k, e); });
  train.get("beta2", [&](auto& k, auto& e) { t.adam.beta2 = parse_number<double>(k, e); });
  train.get("epsilon", [&](auto& k, auto& e) { t.adam.epsilon = parse_number<double>(k, e); });
  train.get("w_voxel_ce",
            [&](auto& k, auto& e) { t.loss_weights.voxel_ce = parse_number<double>(k, e); });
  train.get("w_voxel_lovasz",
            [&](auto& k, auto& e) { t.loss_weights.voxel_lovasz = parse_number<double>(k, e); });
  train.get("w_point_ce",
            [&](auto& k, auto& e) { t.loss_weights.point_ce = parse_number<double>(k, e); });
  train.finish();
  t.seed = c.seed;
  t.ignore_id = c.label_map.ignore_id;
  if (t.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(t.adam.lr > 0.0) || !(t.adam.beta1 >= 0.0 && t.adam.beta1 < 1.0) ||
      !(t.adam.beta2 >= 0.0 && t.adam.beta2 < 1.0) || !(t.adam.epsilon > 0.0)) {
    throw ConfigError("invalid optimizer settings");
  }
  const LossWeights& lw = t.loss_weights;
  if (!(lw.voxel_ce >= 0.0 && lw.voxel_lovasz >= 0.0 && lw.point_ce >= 0.0)) {
    throw ConfigError("loss weights must be nonnegative");
  }

  DataConfig& d = c.data;
  Section data(ini, "data");
  data.get("train_scans", [&](auto&, auto& e) { d.train_scans = e.value; });
  data.get("train_labels", [&](auto&, auto& e) { d.train_labels = e.value; });
  data.get("val_scans", [&](auto&, auto& e) { d.val_scans = e.value; });
  data.get("val_labels", [&](auto&, auto& e) { d.val_labels = e.value; });
  data.get("synthetic_train",
           [&](auto& k, auto& e) { d.synthetic_train = parse_number<int>(k, e); });
  data.get("synthetic_val", [&](auto& k, auto& e) { d.synthetic_val = parse_number<int>(k, e); });
  data.get("synthetic_points",
           [&](auto& k, auto& e) { d.synthetic_points = parse_number<int>(k, e); });
  data.get("synthetic_seed",
           [&](auto& k, auto& e) { d.synthetic_seed = parse_number<uint64_t>(k, e); });
  data.finish();
  if (d.synthetic_train < 0 || d.synthetic_val < 0 || d.synthetic_points < 1) {
    throw ConfigError("synthetic scene counts must be nonnegative and points positive");
  }

  StatsConfig& s = c.stats;
  Section stats(ini, "stats");
  stats.get("cubic_x_min", [&](auto& k, auto& e) { s.cubic.x_min = parse_number<double>(k, e); });
  stats.get("cubic_x_max", [&](auto& k, auto& e) { s.cubic.x_max = parse_number<double>(k, e); });
  stats.get("cubic_y_min", [&](auto& k, auto& e) { s.cubic.y_min = parse_number<double>(k, e); });
  stats.get("cubic_y_max", [&](auto& k, auto& e) { s.cubic.y_max = parse_number<double>(k, e); });
  stats.get("cubic_z_min", [&](auto& k, auto& e) { s.cubic.z_min = parse_number<double>(k, e); });
  stats.get("cubic_z_max", [&](auto& k, auto& e) { s.cubic.z_max = parse_number<double>(k, e); });
  stats.get("cubic_resolution",
            [&](auto& k, auto& e) { s.cubic.resolution = parse_shape(k, e); });
  stats.get("distance_edges",
            [&](auto& k, auto& e) { s.distance_edges = parse_list<double>(k, e); });
  stats.finish();
  s.cubic.validate();
  for (std::size_t i = 1; i < s.distance_edges.size(); ++i) {
    if (!(s.distance_edges[i] > s.distance_edges[i - 1])) {
      throw ConfigError("distance_edges must be strictly increasing");
    }
  }
  if (s.distance_edges.size() < 2) throw ConfigError("distance_edges needs at least two values");
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::vector<ScanFile> list_scans(const std::filesystem::path& scans_dir,
                                 const std::filesystem::path& labels_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(scans_dir)) throw Error("not a directory: " + scans_dir.string());
  std::vector<ScanFile> out;
  for (const auto& entry : fs::directory_iterator(scans_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".bin") continue;
    ScanFile f;
    f.scan = entry.path();
    if (!labels_dir.empty()) {
      f.label = labels_dir / (entry.path().stem().string() + ".label");
      if (!fs::exists(f.label)) throw Error("missing label file " + f.label.string());
    }
    out.push_back(std::move(f));
  }
  std::sort(out.begin(), out.end(),
            [](const ScanFile& a, const ScanFile& b) { return a.scan < b.scan; });
  return out;
}

PointCloud load_scan(const ScanFile& f, const LabelMap& label_map) {
  PointCloud cloud = read_kitti_bin(f.scan);
  if (!f.label.empty()) {
    auto labels = read_kitti_labels(f.label, label_map);
    if (labels.size() != cloud.size()) {
      throw FormatError("label count differs from point count for " + f.scan.string());
    }
    cloud.labels = std::move(labels);
  }
  return cloud;
}

std::vector<PointCloud> synthetic_split(int count, int points, uint64_t seed) {
  std::vector<PointCloud> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    SyntheticSceneSpec spec;
    spec.seed = seed + static_cast<uint64_t>(i);
    spec.num_points = points;
    out.push_back(generate_synthetic_scene(spec));
  }
  return out;
}

}  // namespace cylseg
