#pragma once

#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cylseg/common.hpp"
#include "cylseg/pointcloud.hpp"
#include "cylseg/sparse_tensor.hpp"

namespace cylseg {

struct CylPoint {
  double rho = 0.0;
  double theta = 0.0;  // [-pi, pi)
  double z = 0.0;
};

// Cylindrical grid over (radius, azimuth, height). Azimuth always spans
// [-pi, pi).
struct CylGridSpec {
  double rho_min = 0.0;
  double rho_max = 50.0;
  double z_min = -4.0;
  double z_max = 2.0;
  Shape3 resolution{480, 360, 32};

  void validate() const;
  std::array<double, 3> cell_size() const;
  // (rho, theta, z) of the center of cell c.
  std::array<double, 3> cell_center(const Coord3& c) const;
  Coord3 cell_of(const CylPoint& p) const;

  bool operator==(const CylGridSpec&) const = default;
};

// Axis-aligned Cartesian grid used as the comparison partition.
struct CubicGridSpec {
  double x_min = -50.0, x_max = 50.0;
  double y_min = -50.0, y_max = 50.0;
  double z_min = -4.0, z_max = 2.0;
  // 432 * 400 * 32 equals the 480 * 360 * 32 cell count of the default
  // cylindrical grid.
  Shape3 resolution{432, 400, 32};

  void validate() const;
  std::array<double, 3> cell_size() const;
  Coord3 cell_of(const Point3& p) const;
  // Planar (x, y) distance of cell center c to the origin.
  double center_distance(const Coord3& c) const;
};

// Point <-> occupied-cell tables. Occupied cells are sorted by flat index, so
// the table does not depend on point order; member lists are ascending.
struct VoxelMapping {
  Shape3 shape{0, 0, 0};
  std::vector<int32_t> point_cell;  // point -> index into `cells`
  std::vector<Coord3> cells;
  std::vector<std::vector<int32_t>> cell_points;

  std::size_t num_points() const { return point_cell.size(); }
  std::size_t num_cells() const { return cells.size(); }
};

enum class LabelEncoding { majority, minority };

CylPoint cart_to_cyl(double x, double y, double z);
Point3 cyl_to_cart(const CylPoint& p);

// Wraps any finite angle into [-pi, pi).
double wrap_angle(double theta);

VoxelMapping assign_cells(const PointCloud& cloud, const CylGridSpec& grid);
VoxelMapping assign_cells(const PointCloud& cloud, const CubicGridSpec& grid);

// Per occupied cell, the elementwise maximum of member point features.
// `argmax` (optional) receives, per site and channel, the point that supplied
// the maximum (first member wins ties); scatter_features_backward uses it.
SparseTensor scatter_features(const Matrix& point_features,
                              const VoxelMapping& mapping,
                              std::vector<int32_t>* argmax = nullptr);
Matrix scatter_features_backward(const Matrix& grad_sites,
                                 std::span<const int32_t> argmax,
                                 std::size_t num_points);

// Ignore-labeled points do not vote; cells with no votes get ignore_id.
// Ties resolve to the smaller class id.
std::vector<int32_t> encode_cell_labels(const VoxelMapping& mapping,
                                        std::span<const int32_t> point_labels,
                                        LabelEncoding mode, int num_classes,
                                        int32_t ignore_id);

// mIoU of predicting every point as its cell's encoded label.
double encoding_upper_bound_miou(const PointCloud& cloud, const CylGridSpec& grid,
                                 LabelEncoding mode, int num_classes,
                                 int32_t ignore_id);

// (Δθ/2)(ρ_out² − ρ_in²)Δz for radius bin h.
double cyl_cell_volume(const CylGridSpec& grid, int h);

struct OccupancyRow {
  std::string scheme;  // "cylindrical" or "cubic"
  double distance_lo = 0.0;
  double distance_hi = 0.0;
  std::optional<double> nonempty_proportion;  // empty bin -> undefined
};

// Non-empty cell proportion per planar distance bin, averaged over clouds.
// `distance_edges` are ascending bin edges; bins are [e_i, e_{i+1}).
std::vector<OccupancyRow> occupancy_by_distance(
    std::span<const PointCloud> clouds, const CylGridSpec& cyl,
    const CubicGridSpec& cubic, std::span<const double> distance_edges);

void write_occupancy_csv(std::ostream& out, std::span<const OccupancyRow> rows);

}  // namespace cylseg
