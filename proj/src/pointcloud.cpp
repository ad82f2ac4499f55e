#include "cylseg/pointcloud.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "cylseg/random.hpp"

namespace cylseg {

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw Error("read failed: " + path.string());
  return bytes;
}

uint32_t load_u32_le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) |
         (static_cast<uint32_t>(p[3]) << 24);
}

void store_u32_le(uint32_t v, unsigned char* p) {
  p[0] = static_cast<unsigned char>(v & 0xFF);
  p[1] = static_cast<unsigned char>((v >> 8) & 0xFF);
  p[2] = static_cast<unsigned char>((v >> 16) & 0xFF);
  p[3] = static_cast<unsigned char>((v >> 24) & 0xFF);
}

void write_all(const std::filesystem::path& path,
               const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace

void PointCloud::validate(int num_classes, int32_t ignore_id) const {
  if (intensity.size() != xyz.size()) {
    throw ShapeError("intensity length does not match point count");
  }
  for (const auto& p : xyz) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      throw ShapeError("non-finite point coordinate");
    }
  }
  for (double v : intensity) {
    if (!std::isfinite(v)) throw ShapeError("non-finite intensity");
  }
  if (labels) {
    if (labels->size() != xyz.size()) {
      throw ShapeError("label count does not match point count");
    }
    if (num_classes > 0) {
      for (int32_t l : *labels) {
        if (l != ignore_id && (l < 0 || l >= num_classes)) {
          throw ShapeError("label id out of range: " + std::to_string(l));
        }
      }
    }
  }
}

PointCloud PointCloud::permuted(std::span<const std::size_t> order) const {
  PointCloud out;
  out.xyz.reserve(order.size());
  out.intensity.reserve(order.size());
  for (std::size_t i : order) {
    out.xyz.push_back(xyz.at(i));
    out.intensity.push_back(intensity.at(i));
  }
  if (labels) {
    std::vector<int32_t> l;
    l.reserve(order.size());
    for (std::size_t i : order) l.push_back(labels->at(i));
    out.labels = std::move(l);
  }
  return out;
}

int32_t LabelMap::to_train(uint32_t raw) const {
  auto it = raw_to_train.find(raw);
  return it == raw_to_train.end() ? ignore_id : it->second;
}

uint32_t LabelMap::to_raw(int32_t train) const {
  if (auto it = train_to_raw.find(train); it != train_to_raw.end()) {
    return it->second;
  }
  for (const auto& [raw, t] : raw_to_train) {
    if (t == train) return raw;
  }
  // Ignore or unmapped predictions are written as raw 0.
  return 0;
}

void LabelMap::validate() const {
  if (num_classes < 1) throw ConfigError("label map needs num_classes >= 1");
  for (const auto& [raw, t] : raw_to_train) {
    if (t != ignore_id && (t < 0 || t >= num_classes)) {
      throw ConfigError("label map sends raw id " + std::to_string(raw) +
                        " to invalid train id " + std::to_string(t));
    }
    if (raw > 0xFFFF) {
      throw ConfigError("raw id exceeds 16 bits: " + std::to_string(raw));
    }
  }
  for (const auto& [t, raw] : train_to_raw) {
    if (t < 0 || t >= num_classes) {
      throw ConfigError("inverse label map has invalid train id " +
                        std::to_string(t));
    }
  }
}

LabelMap LabelMap::identity(int k, int32_t ignore_id) {
  LabelMap m;
  m.num_classes = k;
  m.ignore_id = ignore_id;
  for (int i = 0; i < k; ++i) {
    m.raw_to_train[static_cast<uint32_t>(i)] = i;
    m.train_to_raw[i] = static_cast<uint32_t>(i);
  }
  return m;
}

LabelMap LabelMap::semantic_kitti() {
  LabelMap m;
  m.num_classes = 19;
  m.ignore_id = 255;
  const std::pair<uint32_t, int32_t> learning_map[] = {
      {10, 0},  {11, 1},  {13, 4},  {15, 2},  {16, 4},  {18, 3},  {20, 4},
      {30, 5},  {31, 6},  {32, 7},  {40, 8},  {44, 9},  {48, 10}, {49, 11},
      {50, 12}, {51, 13}, {60, 8},  {70, 14}, {71, 15}, {72, 16}, {80, 17},
      {81, 18}, {252, 0}, {253, 6}, {254, 5}, {255, 7}, {256, 4}, {257, 4},
      {258, 3}, {259, 4}};
  for (const auto& [raw, t] : learning_map) m.raw_to_train[raw] = t;
  // 0 unlabeled, 1 outlier, 52 other-structure, 99 other-object -> ignore.
  for (uint32_t raw : {0u, 1u, 52u, 99u}) m.raw_to_train[raw] = m.ignore_id;
  const uint32_t inverse[] = {10, 11, 15, 18, 20, 30, 31, 32, 40, 44,
                              48, 49, 50, 51, 70, 71, 72, 80, 81};
  for (int32_t t = 0; t < 19; ++t) m.train_to_raw[t] = inverse[t];
  return m;
}

void SyntheticSceneSpec::validate() const {
  if (num_points <= 0) throw ConfigError("synthetic num_points must be > 0");
  if (!(max_range > 0.0)) throw ConfigError("synthetic max_range must be > 0");
  if (!(min_range >= 0.0 && min_range < max_range)) {
    throw ConfigError("synthetic min_range must lie in [0, max_range)");
  }
  if (num_poles < 1 || num_boxes < 1) {
    throw ConfigError("synthetic scenes need at least one pole and one box");
  }
  if (pole_fraction <= 0.0 || box_fraction <= 0.0 ||
      pole_fraction + box_fraction >= 1.0) {
    throw ConfigError("synthetic object fractions must be positive, sum < 1");
  }
}

PointCloud read_kitti_bin(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  if (bytes.size() % 16 != 0) {
    throw FormatError("file length not a multiple of 16: " + path.string());
  }
  const std::size_t n = bytes.size() / 16;
  PointCloud cloud;
  cloud.xyz.resize(n);
  cloud.intensity.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* p = bytes.data() + 16 * i;
    float v[4];
    for (int k = 0; k < 4; ++k) v[k] = std::bit_cast<float>(load_u32_le(p + 4 * k));
    cloud.xyz[i] = {v[0], v[1], v[2]};
    cloud.intensity[i] = v[3];
  }
  return cloud;
}

void write_kitti_bin(const std::filesystem::path& path, const PointCloud& cloud) {
  if (cloud.intensity.size() != cloud.xyz.size()) {
    throw ShapeError("intensity length does not match point count");
  }
  std::vector<unsigned char> bytes(cloud.size() * 16);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const float v[4] = {static_cast<float>(cloud.xyz[i].x),
                        static_cast<float>(cloud.xyz[i].y),
                        static_cast<float>(cloud.xyz[i].z),
                        static_cast<float>(cloud.intensity[i])};
    for (int k = 0; k < 4; ++k) {
      store_u32_le(std::bit_cast<uint32_t>(v[k]), bytes.data() + 16 * i + 4 * k);
    }
  }
  write_all(path, bytes);
}

std::vector<int32_t> read_kitti_labels(const std::filesystem::path& path,
                                       const LabelMap& label_map) {
  const auto bytes = read_all(path);
  if (bytes.size() % 4 != 0) {
    throw FormatError("label file length not a multiple of 4: " + path.string());
  }
  std::vector<int32_t> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const uint32_t record = load_u32_le(bytes.data() + 4 * i);
    out[i] = label_map.to_train(record & 0xFFFFu);
  }
  return out;
}

void write_kitti_labels(const std::filesystem::path& path,
                        std::span<const int32_t> train_labels,
                        const LabelMap& label_map) {
  std::vector<unsigned char> bytes(train_labels.size() * 4);
  for (std::size_t i = 0; i < train_labels.size(); ++i) {
    store_u32_le(label_map.to_raw(train_labels[i]) & 0xFFFFu, bytes.data() + 4 * i);
  }
  write_all(path, bytes);
}

namespace {

struct Obstacle {
  double cx, cy, rho;
  double yaw;
  bool is_pole;
};

// Places obstacles at random planar positions with a minimum spacing.
std::vector<Obstacle> place_obstacles(const SyntheticSceneSpec& spec, Rng& rng) {
  std::vector<Obstacle> obs;
  const double lo = std::max(spec.min_range + 3.0, 5.0);
  const double hi = std::max(lo + 1.0, spec.max_range - 6.0);
  const int total = spec.num_poles + spec.num_boxes;
  for (int k = 0; k < total; ++k) {
    const bool pole = k < spec.num_poles;
    Obstacle o{};
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double rho = rng.uniform(lo, hi);
      const double theta = rng.uniform(-std::numbers::pi, std::numbers::pi);
      o = {rho * std::cos(theta), rho * std::sin(theta), rho,
           rng.uniform(0.0, std::numbers::pi), pole};
      bool clear = true;
      for (const auto& other : obs) {
        if (std::hypot(other.cx - o.cx, other.cy - o.cy) < 6.0) {
          clear = false;
          break;
        }
      }
      if (clear) break;
    }
    obs.push_back(o);
  }
  return obs;
}

bool inside_box_footprint(const Obstacle& b, const SyntheticSceneSpec& spec,
                          double x, double y) {
  const double dx = x - b.cx;
  const double dy = y - b.cy;
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  return std::abs(u) <= 0.5 * spec.box_length && std::abs(v) <= 0.5 * spec.box_width;
}

// Splits `count` points across obstacles with weights proportional to 1/rho,
// mimicking the falloff of returns from a rotating sensor.
std::vector<int> share_by_inverse_range(const std::vector<const Obstacle*>& objs,
                                        int count) {
  std::vector<int> out(objs.size(), 0);
  if (objs.empty()) return out;
  double total = 0.0;
  for (const auto* o : objs) total += 1.0 / o->rho;
  int assigned = 0;
  for (std::size_t k = 0; k < objs.size(); ++k) {
    out[k] = static_cast<int>(std::floor(count * (1.0 / objs[k]->rho) / total));
    out[k] = std::max(out[k], 1);
    assigned += out[k];
  }
  // Remainder goes to the nearest objects in order.
  for (std::size_t k = 0; assigned < count; k = (k + 1) % objs.size(), ++assigned) {
    ++out[k];
  }
  return out;
}

}  // namespace

PointCloud generate_synthetic_scene(const SyntheticSceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto obstacles = place_obstacles(spec, rng);

  std::vector<const Obstacle*> poles, boxes;
  for (const auto& o : obstacles) (o.is_pole ? poles : boxes).push_back(&o);
  auto by_range = [](const Obstacle* a, const Obstacle* b) { return a->rho < b->rho; };
  std::sort(poles.begin(), poles.end(), by_range);
  std::sort(boxes.begin(), boxes.end(), by_range);

  const int n_pole = std::max<int>(static_cast<int>(poles.size()),
                                   static_cast<int>(spec.num_points * spec.pole_fraction));
  const int n_box = std::max<int>(static_cast<int>(boxes.size()),
                                  static_cast<int>(spec.num_points * spec.box_fraction));
  const int n_ground = std::max(1, spec.num_points - n_pole - n_box);

  PointCloud cloud;
  std::vector<int32_t> labels;
  cloud.xyz.reserve(spec.num_points);
  auto emit = [&](double x, double y, double z, int32_t label) {
    cloud.xyz.push_back({x, y, z});
    cloud.intensity.push_back(rng.uniform());
    labels.push_back(label);
  };

  // Ground: rho uniform over the annulus gives planar density ~ 1/rho.
  for (int i = 0; i < n_ground; ++i) {
    double x = 0.0, y = 0.0;
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double rho = rng.uniform(spec.min_range, spec.max_range);
      const double theta = rng.uniform(-std::numbers::pi, std::numbers::pi);
      x = rho * std::cos(theta);
      y = rho * std::sin(theta);
      bool occluded = false;
      for (const auto* b : boxes) occluded = occluded || inside_box_footprint(*b, spec, x, y);
      if (!occluded) break;
    }
    emit(x, y, spec.ground_z + spec.ground_noise * rng.normal(), kGroundClass);
  }

  const auto pole_counts = share_by_inverse_range(poles, n_pole);
  for (std::size_t k = 0; k < poles.size(); ++k) {
    for (int i = 0; i < pole_counts[k]; ++i) {
      const double phi = rng.uniform(-std::numbers::pi, std::numbers::pi);
      const double z = spec.ground_z + rng.uniform(0.05, spec.pole_height);
      emit(poles[k]->cx + spec.pole_radius * std::cos(phi),
           poles[k]->cy + spec.pole_radius * std::sin(phi), z, kPoleClass);
    }
  }

  const auto box_counts = share_by_inverse_range(boxes, n_box);
  const double L = spec.box_length, W = spec.box_width, H = spec.box_height;
  // Face areas: two long sides, two short sides, top.
  const double areas[5] = {L * H, L * H, W * H, W * H, L * W};
  const double area_total = areas[0] + areas[1] + areas[2] + areas[3] + areas[4];
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    const auto& b = *boxes[k];
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    for (int i = 0; i < box_counts[k]; ++i) {
      double pick = rng.uniform(0.0, area_total);
      int face = 0;
      while (face < 4 && pick >= areas[face]) pick -= areas[face++];
      double u = 0.0, v = 0.0, h = 0.0;
      const double a = rng.uniform(), bb = rng.uniform();
      switch (face) {
        case 0: u = (a - 0.5) * L; v = 0.5 * W; h = bb * H; break;
        case 1: u = (a - 0.5) * L; v = -0.5 * W; h = bb * H; break;
        case 2: u = 0.5 * L; v = (a - 0.5) * W; h = bb * H; break;
        case 3: u = -0.5 * L; v = (a - 0.5) * W; h = bb * H; break;
        default: u = (a - 0.5) * L; v = (bb - 0.5) * W; h = H; break;
      }
      emit(b.cx + c * u - s * v, b.cy + s * u + c * v,
           spec.ground_z + 0.05 + h, kBoxClass);
    }
  }

  // Objects are placed well inside max_range; guard the postcondition anyway.
  for (auto& p : cloud.xyz) {
    const double rho = std::hypot(p.x, p.y);
    if (rho > spec.max_range) {
      const double scale = spec.max_range / rho * (1.0 - 1e-12);
      p.x *= scale;
      p.y *= scale;
    }
  }
  cloud.labels = std::move(labels);
  return cloud;
}

}  // namespace cylseg
