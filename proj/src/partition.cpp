#include "cylseg/partition.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "cylseg/metrics.hpp"

namespace cylseg {

namespace {

constexpr double kPi = std::numbers::pi;

int32_t bin_index(double v, double lo, double step, int32_t n) {
  const double f = std::floor((v - lo) / step);
  if (!(f >= 0.0)) return 0;  // also catches NaN
  if (f >= n) return n - 1;
  return static_cast<int32_t>(f);
}

template <typename CellFn>
VoxelMapping build_mapping(std::size_t n, Shape3 shape, CellFn cell_of) {
  VoxelMapping m;
  m.shape = shape;
  std::vector<std::pair<int64_t, int32_t>> keyed(n);
  for (std::size_t i = 0; i < n; ++i) {
    keyed[i] = {flat_index(cell_of(i), shape), static_cast<int32_t>(i)};
  }
  std::sort(keyed.begin(), keyed.end());
  m.point_cell.assign(n, -1);
  for (std::size_t e = 0; e < keyed.size(); ++e) {
    if (e == 0 || keyed[e].first != keyed[e - 1].first) {
      const int64_t f = keyed[e].first;
      const auto l = static_cast<int32_t>(f % shape[2]);
      const auto w = static_cast<int32_t>((f / shape[2]) % shape[1]);
      const auto h = static_cast<int32_t>(f / (static_cast<int64_t>(shape[2]) * shape[1]));
      m.cells.push_back({h, w, l});
      m.cell_points.emplace_back();
    }
    m.cell_points.back().push_back(keyed[e].second);
    m.point_cell[keyed[e].second] = static_cast<int32_t>(m.cells.size() - 1);
  }
  return m;
}

}  // namespace

double wrap_angle(double theta) {
  double t = std::fmod(theta + kPi, 2.0 * kPi);
  if (t < 0.0) t += 2.0 * kPi;
  t -= kPi;
  // fmod rounding can land exactly on +pi.
  if (t >= kPi) t = -kPi;
  return t;
}

CylPoint cart_to_cyl(double x, double y, double z) {
  const double rho = std::hypot(x, y);
  const double theta = rho == 0.0 ? 0.0 : std::atan2(y, x);
  return {rho, theta >= kPi ? -kPi : theta, z};
}

Point3 cyl_to_cart(const CylPoint& p) {
  return {p.rho * std::cos(p.theta), p.rho * std::sin(p.theta), p.z};
}

void CylGridSpec::validate() const {
  if (!(rho_min >= 0.0 && rho_max > rho_min)) {
    throw ConfigError("grid needs 0 <= rho_min < rho_max");
  }
  if (!(z_max > z_min)) throw ConfigError("grid needs z_min < z_max");
  for (int r : resolution) {
    if (r < 1) throw ConfigError("grid resolution must be >= 1 per axis");
  }
}

std::array<double, 3> CylGridSpec::cell_size() const {
  return {(rho_max - rho_min) / resolution[0], 2.0 * kPi / resolution[1],
          (z_max - z_min) / resolution[2]};
}

std::array<double, 3> CylGridSpec::cell_center(const Coord3& c) const {
  const auto d = cell_size();
  return {rho_min + (c[0] + 0.5) * d[0], -kPi + (c[1] + 0.5) * d[1],
          z_min + (c[2] + 0.5) * d[2]};
}

Coord3 CylGridSpec::cell_of(const CylPoint& p) const {
  const auto d = cell_size();
  return {bin_index(p.rho, rho_min, d[0], resolution[0]),
          bin_index(wrap_angle(p.theta), -kPi, d[1], resolution[1]),
          bin_index(p.z, z_min, d[2], resolution[2])};
}

void CubicGridSpec::validate() const {
  if (!(x_max > x_min && y_max > y_min && z_max > z_min)) {
    throw ConfigError("cubic grid needs min < max per axis");
  }
  for (int r : resolution) {
    if (r < 1) throw ConfigError("cubic grid resolution must be >= 1 per axis");
  }
}

std::array<double, 3> CubicGridSpec::cell_size() const {
  return {(x_max - x_min) / resolution[0], (y_max - y_min) / resolution[1],
          (z_max - z_min) / resolution[2]};
}

Coord3 CubicGridSpec::cell_of(const Point3& p) const {
  const auto d = cell_size();
  return {bin_index(p.x, x_min, d[0], resolution[0]),
          bin_index(p.y, y_min, d[1], resolution[1]),
          bin_index(p.z, z_min, d[2], resolution[2])};
}

double CubicGridSpec::center_distance(const Coord3& c) const {
  const auto d = cell_size();
  return std::hypot(x_min + (c[0] + 0.5) * d[0], y_min + (c[1] + 0.5) * d[1]);
}

VoxelMapping assign_cells(const PointCloud& cloud, const CylGridSpec& grid) {
  grid.validate();
  return build_mapping(cloud.size(), grid.resolution, [&](std::size_t i) {
    const auto& p = cloud.xyz[i];
    return grid.cell_of(cart_to_cyl(p.x, p.y, p.z));
  });
}

VoxelMapping assign_cells(const PointCloud& cloud, const CubicGridSpec& grid) {
  grid.validate();
  return build_mapping(cloud.size(), grid.resolution,
                       [&](std::size_t i) { return grid.cell_of(cloud.xyz[i]); });
}

SparseTensor scatter_features(const Matrix& point_features, const VoxelMapping& mapping,
                              std::vector<int32_t>* argmax) {
  if (point_features.rows != mapping.num_points()) {
    throw ShapeError("feature rows " + std::to_string(point_features.rows) +
                     " != mapped points " + std::to_string(mapping.num_points()));
  }
  const std::size_t c = point_features.cols;
  SparseTensor out;
  out.coords = mapping.cells;
  out.spatial_shape = mapping.shape;
  out.features = Matrix(mapping.num_cells(), c);
  if (argmax) argmax->assign(mapping.num_cells() * c, -1);
  for (std::size_t s = 0; s < mapping.num_cells(); ++s) {
    const auto& members = mapping.cell_points[s];
    for (std::size_t k = 0; k < c; ++k) {
      int32_t best = members.front();
      double v = point_features(best, k);
      for (std::size_t e = 1; e < members.size(); ++e) {
        const double cand = point_features(members[e], k);
        if (cand > v) {
          v = cand;
          best = members[e];
        }
      }
      out.features(s, k) = v;
      if (argmax) (*argmax)[s * c + k] = best;
    }
  }
  return out;
}

Matrix scatter_features_backward(const Matrix& grad_sites, std::span<const int32_t> argmax,
                                 std::size_t num_points) {
  if (argmax.size() != grad_sites.data.size()) {
    throw ShapeError("argmax table does not match the site gradient");
  }
  Matrix g(num_points, grad_sites.cols);
  for (std::size_t s = 0; s < grad_sites.rows; ++s) {
    for (std::size_t k = 0; k < grad_sites.cols; ++k) {
      g(argmax[s * grad_sites.cols + k], k) += grad_sites(s, k);
    }
  }
  return g;
}

std::vector<int32_t> encode_cell_labels(const VoxelMapping& mapping,
                                        std::span<const int32_t> point_labels,
                                        LabelEncoding mode, int num_classes,
                                        int32_t ignore_id) {
  if (point_labels.size() != mapping.num_points()) {
    throw ShapeError("label count does not match mapped points");
  }
  std::vector<int32_t> out(mapping.num_cells(), ignore_id);
  std::vector<int> counts(num_classes);
  for (std::size_t s = 0; s < mapping.num_cells(); ++s) {
    std::fill(counts.begin(), counts.end(), 0);
    for (int32_t p : mapping.cell_points[s]) {
      const int32_t l = point_labels[p];
      if (l == ignore_id) continue;
      if (l < 0 || l >= num_classes) throw ShapeError("label id out of range");
      ++counts[l];
    }
    int32_t pick = ignore_id;
    for (int k = 0; k < num_classes; ++k) {
      if (counts[k] == 0) continue;
      // Strict comparison keeps the smaller id on ties.
      if (pick == ignore_id ||
          (mode == LabelEncoding::majority ? counts[k] > counts[pick] : counts[k] < counts[pick])) {
        pick = k;
      }
    }
    out[s] = pick;
  }
  return out;
}

double encoding_upper_bound_miou(const PointCloud& cloud, const CylGridSpec& grid,
                                 LabelEncoding mode, int num_classes, int32_t ignore_id) {
  if (!cloud.labels) throw ShapeError("encoding bound needs a labeled cloud");
  const auto& labels = *cloud.labels;
  const auto mapping = assign_cells(cloud, grid);
  const auto cell_labels = encode_cell_labels(mapping, labels, mode, num_classes, ignore_id);
  ConfusionMatrix cm(num_classes, ignore_id);
  std::vector<int32_t> pred(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) pred[i] = cell_labels[mapping.point_cell[i]];
  cm.update(labels, pred);
  const auto result = compute_miou(cm);
  if (!result.miou) throw ShapeError("encoding bound needs at least one labeled point");
  return *result.miou;
}

double cyl_cell_volume(const CylGridSpec& grid, int h) {
  const auto d = grid.cell_size();
  const double r_in = grid.rho_min + h * d[0];
  const double r_out = r_in + d[0];
  return 0.5 * d[1] * (r_out * r_out - r_in * r_in) * d[2];
}

namespace {

int distance_bin(double d, std::span<const double> edges) {
  if (edges.size() < 2 || d < edges.front() || d >= edges.back()) return -1;
  const auto it = std::upper_bound(edges.begin(), edges.end(), d);
  return static_cast<int>(it - edges.begin()) - 1;
}

// Accumulates, per distance bin, the total cell count and the mean non-empty
// proportion over clouds.
struct SchemeStats {
  std::vector<int64_t> cells_per_bin;
  std::vector<double> proportion_sum;
};

}  // namespace

std::vector<OccupancyRow> occupancy_by_distance(std::span<const PointCloud> clouds,
                                                const CylGridSpec& cyl,
                                                const CubicGridSpec& cubic,
                                                std::span<const double> distance_edges) {
  cyl.validate();
  cubic.validate();
  if (distance_edges.size() < 2 ||
      !std::is_sorted(distance_edges.begin(), distance_edges.end())) {
    throw ConfigError("distance bins need at least two ascending edges");
  }
  const std::size_t nbins = distance_edges.size() - 1;

  // Cell -> distance bin depends only on the planar (h, w) column; every
  // column holds resolution[2] cells.
  std::vector<int> cyl_bin(static_cast<std::size_t>(cyl.resolution[0]));
  SchemeStats cs{std::vector<int64_t>(nbins, 0), std::vector<double>(nbins, 0.0)};
  for (int h = 0; h < cyl.resolution[0]; ++h) {
    cyl_bin[h] = distance_bin(cyl.cell_center({h, 0, 0})[0], distance_edges);
    if (cyl_bin[h] >= 0) {
      cs.cells_per_bin[cyl_bin[h]] +=
          static_cast<int64_t>(cyl.resolution[1]) * cyl.resolution[2];
    }
  }
  std::vector<int> cub_bin(static_cast<std::size_t>(cubic.resolution[0]) * cubic.resolution[1]);
  SchemeStats qs{std::vector<int64_t>(nbins, 0), std::vector<double>(nbins, 0.0)};
  for (int i = 0; i < cubic.resolution[0]; ++i) {
    for (int j = 0; j < cubic.resolution[1]; ++j) {
      const int b = distance_bin(cubic.center_distance({i, j, 0}), distance_edges);
      cub_bin[static_cast<std::size_t>(i) * cubic.resolution[1] + j] = b;
      if (b >= 0) qs.cells_per_bin[b] += cubic.resolution[2];
    }
  }

  for (const auto& cloud : clouds) {
    std::vector<int64_t> cyl_hits(nbins, 0), cub_hits(nbins, 0);
    for (const auto& c : assign_cells(cloud, cyl).cells) {
      if (const int b = cyl_bin[c[0]]; b >= 0) ++cyl_hits[b];
    }
    for (const auto& c : assign_cells(cloud, cubic).cells) {
      const int b = cub_bin[static_cast<std::size_t>(c[0]) * cubic.resolution[1] + c[1]];
      if (b >= 0) ++cub_hits[b];
    }
    for (std::size_t b = 0; b < nbins; ++b) {
      if (cs.cells_per_bin[b] > 0) {
        cs.proportion_sum[b] += static_cast<double>(cyl_hits[b]) / cs.cells_per_bin[b];
      }
      if (qs.cells_per_bin[b] > 0) {
        qs.proportion_sum[b] += static_cast<double>(cub_hits[b]) / qs.cells_per_bin[b];
      }
    }
  }

  std::vector<OccupancyRow> rows;
  const double n = clouds.empty() ? 1.0 : static_cast<double>(clouds.size());
  for (const auto& [name, stats] :
       {std::pair<const char*, const SchemeStats*>{"cylindrical", &cs}, {"cubic", &qs}}) {
    for (std::size_t b = 0; b < nbins; ++b) {
      OccupancyRow row{name, distance_edges[b], distance_edges[b + 1], std::nullopt};
      if (stats->cells_per_bin[b] > 0) row.nonempty_proportion = stats->proportion_sum[b] / n;
      rows.push_back(row);
    }
  }
  return rows;
}

void write_occupancy_csv(std::ostream& out, std::span<const OccupancyRow> rows) {
  out << "scheme,distance_lo,distance_hi,nonempty_proportion\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line << r.scheme << ',' << r.distance_lo << ',' << r.distance_hi << ',';
    if (r.nonempty_proportion) line << std::setprecision(10) << *r.nonempty_proportion;
    out << line.str() << '\n';
  }
}

}  // namespace cylseg
