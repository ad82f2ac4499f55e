#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include "cylseg/metrics.hpp"
#include "cylseg/partition.hpp"
#include "generators.hpp"

using namespace cylseg;
using doctest::Approx;

namespace {

constexpr double kPi = std::numbers::pi;

// Brute-force binning, written against the grid definition directly.
Coord3 oracle_cell(const Point3& p, const CylGridSpec& g) {
  const double rho = std::sqrt(p.x * p.x + p.y * p.y);
  double theta = rho == 0.0 ? 0.0 : std::atan2(p.y, p.x);
  if (theta >= kPi) theta -= 2 * kPi;
  const auto bin = [](double v, double lo, double hi, int n) {
    int b = static_cast<int>(std::floor((v - lo) / ((hi - lo) / n)));
    return std::clamp(b, 0, n - 1);
  };
  return {bin(rho, g.rho_min, g.rho_max, g.resolution[0]),
          bin(theta, -kPi, kPi, g.resolution[1]),
          bin(p.z, g.z_min, g.z_max, g.resolution[2])};
}

PointCloud cloud_of(std::vector<Point3> pts, std::vector<int32_t> labels = {}) {
  PointCloud c;
  c.xyz = std::move(pts);
  c.intensity.assign(c.xyz.size(), 0.0);
  if (!labels.empty()) c.labels = std::move(labels);
  return c;
}

}  // namespace

TEST_CASE("cart_to_cyl") {
  CylPoint p = cart_to_cyl(1, 0, 5);
  CHECK(p.rho == 1.0);
  CHECK(p.theta == 0.0);
  CHECK(p.z == 5.0);
  p = cart_to_cyl(0, 1, 0);
  CHECK(p.rho == 1.0);
  CHECK(p.theta == Approx(kPi / 2).epsilon(1e-15));
  p = cart_to_cyl(3, 4, 2);
  CHECK(p.rho == Approx(5.0).epsilon(1e-15));
  CHECK(p.theta == Approx(std::atan2(4.0, 3.0)).epsilon(1e-15));
  p = cart_to_cyl(0, 0, 1);
  CHECK(p.rho == 0.0);
  CHECK(p.theta == 0.0);
  p = cart_to_cyl(-1, 0, 0);  // atan2 gives +pi, normalized to -pi
  CHECK(p.theta == -kPi);
}

TEST_CASE("cylindrical round trip and angle range") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Point3 q{rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(-5, 5)};
    const CylPoint c = cart_to_cyl(q.x, q.y, q.z);
    CHECK(c.theta >= -kPi);
    CHECK(c.theta < kPi);
    const Point3 r = cyl_to_cart(c);
    const double scale = std::max({std::abs(q.x), std::abs(q.y), std::abs(q.z), 1e-300});
    CHECK(std::abs(r.x - q.x) <= 1e-12 * scale);
    CHECK(std::abs(r.y - q.y) <= 1e-12 * scale);
    CHECK(r.z == q.z);

    const CylGridSpec g;
    CylPoint shifted = c;
    shifted.theta += 2 * kPi;
    CHECK(g.cell_of(shifted) == g.cell_of(c));
  }
}

TEST_CASE("assign_cells examples") {
  const CylGridSpec g;
  SUBCASE("minimum bin") {
    const Point3 p = cyl_to_cart({0.1, -kPi, g.z_min});
    CHECK(g.cell_of({0.1, -kPi, g.z_min}) == Coord3{0, 0, 0});
    const VoxelMapping m = assign_cells(cloud_of({p}), g);
    REQUIRE(m.num_cells() == 1);
    CHECK(m.cells[0][0] == 0);
    CHECK(m.cells[0][2] == 0);
  }
  SUBCASE("clamped radius") {
    const VoxelMapping m = assign_cells(cloud_of({{g.rho_max + 10, 0, 0}}), g);
    CHECK(m.cells[0][0] == g.resolution[0] - 1);
  }
  SUBCASE("empty cloud") {
    const VoxelMapping m = assign_cells(PointCloud{}, g);
    CHECK(m.num_cells() == 0);
    CHECK(m.num_points() == 0);
  }
}

TEST_CASE("assign_cells matches brute-force binning") {
  Rng rng(2);
  CylGridSpec g;
  g.rho_max = 10;
  g.z_min = -2;
  g.z_max = 2;
  g.resolution = {4, 4, 4};
  const PointCloud c = testing::random_cloud(rng, 1000, 8, -2.5, 2.5);
  const VoxelMapping m = assign_cells(c, g);
  std::map<Coord3, int> want;
  for (const auto& p : c.xyz) ++want[oracle_cell(p, g)];
  std::map<Coord3, int> got;
  for (std::size_t k = 0; k < m.num_cells(); ++k) got[m.cells[k]] = m.cell_points[k].size();
  CHECK(got == want);

  // Mapping invariants: every point in exactly one cell list, consistent indices.
  std::vector<int> seen(c.size(), 0);
  std::size_t total = 0;
  for (std::size_t k = 0; k < m.num_cells(); ++k) {
    for (int32_t p : m.cell_points[k]) {
      ++seen[p];
      CHECK(m.point_cell[p] == static_cast<int32_t>(k));
    }
    total += m.cell_points[k].size();
  }
  CHECK(total == c.size());
  CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
  CHECK(std::is_sorted(m.cells.begin(), m.cells.end()));
}

TEST_CASE("scatter_features uses elementwise max") {
  SUBCASE("single point") {
    const VoxelMapping m = assign_cells(cloud_of({{1, 1, 0}}), CylGridSpec{});
    Matrix f(1, 2);
    f(0, 0) = -4;
    f(0, 1) = 7;
    const SparseTensor s = scatter_features(f, m);
    REQUIRE(s.size() == 1);
    CHECK(s.features == f);
    CHECK(s.spatial_shape == CylGridSpec{}.resolution);
  }
  SUBCASE("two points one cell") {
    const VoxelMapping m = assign_cells(cloud_of({{10, 0, 0}, {10.001, 0, 0}}), CylGridSpec{});
    REQUIRE(m.num_cells() == 1);
    Matrix f(2, 2);
    f(0, 0) = 1;
    f(0, 1) = 5;
    f(1, 0) = 3;
    f(1, 1) = 2;
    const SparseTensor s = scatter_features(f, m);
    CHECK(s.features(0, 0) == 3);
    CHECK(s.features(0, 1) == 5);
  }
  SUBCASE("group-by oracle") {
    Rng rng(4);
    CylGridSpec g;
    g.rho_max = 10;
    g.resolution = {5, 8, 4};
    const PointCloud c = testing::random_cloud(rng, 200, 7, -4, 2);
    const VoxelMapping m = assign_cells(c, g);
    const Matrix f = testing::random_matrix(rng, 200, 3);
    const SparseTensor s = scatter_features(f, m);
    std::map<Coord3, std::vector<double>> want;
    for (std::size_t i = 0; i < 200; ++i) {
      auto [it, fresh] =
          want.try_emplace(oracle_cell(c.xyz[i], g), f.row(i).begin(), f.row(i).end());
      if (!fresh) {
        for (int k = 0; k < 3; ++k) it->second[k] = std::max(it->second[k], f(i, k));
      }
    }
    REQUIRE(s.size() == want.size());
    for (std::size_t j = 0; j < s.size(); ++j) {
      const auto row = s.features.row(j);
      CHECK(std::vector<double>(row.begin(), row.end()) == want.at(s.coords[j]));
    }
  }
  SUBCASE("row mismatch") {
    const VoxelMapping m = assign_cells(cloud_of({{1, 1, 0}}), CylGridSpec{});
    CHECK_THROWS_AS(scatter_features(Matrix(2, 1), m), ShapeError);
  }
}

TEST_CASE("encode_cell_labels") {
  // Every point in one cell of the default grid.
  const auto one_cell = [](std::vector<int32_t> labels) {
    std::vector<Point3> pts(labels.size(), Point3{10, 0, 0});
    return cloud_of(pts, labels);
  };
  const auto encode = [](const PointCloud& c, LabelEncoding mode) {
    const VoxelMapping m = assign_cells(c, CylGridSpec{});
    return encode_cell_labels(m, *c.labels, mode, 5, 255);
  };
  CHECK(encode(one_cell({1, 1, 2}), LabelEncoding::majority)[0] == 1);
  CHECK(encode(one_cell({1, 1, 2}), LabelEncoding::minority)[0] == 2);
  CHECK(encode(one_cell({3}), LabelEncoding::majority)[0] == 3);
  CHECK(encode(one_cell({3}), LabelEncoding::minority)[0] == 3);
  CHECK(encode(one_cell({1, 1, 2, 2}), LabelEncoding::majority)[0] == 1);
  CHECK(encode(one_cell({2, 2, 1, 1}), LabelEncoding::minority)[0] == 1);
  CHECK(encode(one_cell({255, 255, 4}), LabelEncoding::majority)[0] == 4);
  CHECK(encode(one_cell({255, 255}), LabelEncoding::majority)[0] == 255);
}

TEST_CASE("encoding upper bounds") {
  CylGridSpec g;
  g.rho_max = 10;
  g.resolution = {4, 8, 2};
  SUBCASE("label-pure cloud") {
    // Label = radius bin, so each cell is pure.
    Rng rng(8);
    PointCloud c;
    std::vector<int32_t> labels;
    for (int i = 0; i < 300; ++i) {
      const double r = rng.uniform(0.1, 9.9);
      const double t = rng.uniform(-kPi, kPi);
      c.xyz.push_back({r * std::cos(t), r * std::sin(t), rng.uniform(-3, 1)});
      labels.push_back(static_cast<int32_t>(r / 2.5));
    }
    c.intensity.assign(300, 0.0);
    c.labels = labels;
    CHECK(encoding_upper_bound_miou(c, g, LabelEncoding::majority, 4, 255) == 1.0);
    CHECK(encoding_upper_bound_miou(c, g, LabelEncoding::minority, 4, 255) == 1.0);
  }
  SUBCASE("two points, two classes, one cell") {
    const PointCloud c = cloud_of({{5, 0, 0}, {5.01, 0, 0}}, {1, 0});
    CHECK(encoding_upper_bound_miou(c, g, LabelEncoding::majority, 2, 255) == Approx(0.25));
  }
  SUBCASE("majority >= minority on random clouds") {
    Rng rng(9);
    for (int trial = 0; trial < 25; ++trial) {
      const PointCloud c = testing::random_cloud(rng, 400, 9, -4, 2, 3);
      const double maj = encoding_upper_bound_miou(c, g, LabelEncoding::majority, 3, 255);
      const double mino = encoding_upper_bound_miou(c, g, LabelEncoding::minority, 3, 255);
      CHECK(maj >= mino);
      CHECK(maj < 1.0);  // random labels mix within cells
    }
  }
  SUBCASE("no labeled points") {
    const PointCloud c = cloud_of({{5, 0, 0}}, {255});
    CHECK_THROWS_AS(encoding_upper_bound_miou(c, g, LabelEncoding::majority, 2, 255), Error);
  }
}

TEST_CASE("cell volume grows with radius") {
  const CylGridSpec g;
  double prev = 0.0;
  for (int h = 0; h < g.resolution[0]; ++h) {
    const double v = cyl_cell_volume(g, h);
    CHECK(v > prev);
    prev = v;
  }
  const auto d = g.cell_size();
  const double r0 = 3 * d[0], r1 = 4 * d[0];
  CHECK(cyl_cell_volume(g, 3) == Approx(d[1] / 2 * (r1 * r1 - r0 * r0) * d[2]));
}

TEST_CASE("occupancy_by_distance") {
  const std::vector<double> edges{0, 1, 2};
  CubicGridSpec cubic;
  cubic.x_min = cubic.y_min = -2;
  cubic.x_max = cubic.y_max = 2;
  cubic.z_min = -1;
  cubic.z_max = 1;
  cubic.resolution = {4, 4, 1};
  CylGridSpec cyl;
  cyl.rho_max = 2;
  cyl.z_min = -1;
  cyl.z_max = 1;
  cyl.resolution = {2, 4, 1};

  SUBCASE("saturated cylindrical grid") {
    PointCloud c;
    for (int h = 0; h < 2; ++h) {
      for (int w = 0; w < 4; ++w) {
        const auto center = cyl.cell_center({h, w, 0});
        c.xyz.push_back(cyl_to_cart({center[0], center[1], center[2]}));
      }
    }
    c.intensity.assign(c.size(), 0.0);
    const std::vector<PointCloud> clouds{c};
    for (const auto& row : occupancy_by_distance(clouds, cyl, cubic, edges)) {
      if (row.scheme == "cylindrical") {
        REQUIRE(row.nonempty_proportion);
        CHECK(*row.nonempty_proportion == 1.0);
      }
    }
  }
  SUBCASE("empty cloud") {
    const std::vector<PointCloud> clouds{PointCloud{}};
    const auto rows = occupancy_by_distance(clouds, cyl, cubic, edges);
    CHECK(rows.size() == 4);
    for (const auto& row : rows) {
      REQUIRE(row.nonempty_proportion);
      CHECK(*row.nonempty_proportion == 0.0);
    }
  }
  SUBCASE("bins without cells are undefined and CSV is blank") {
    const std::vector<double> far{0, 1, 2, 100, 200};
    const std::vector<PointCloud> clouds{PointCloud{}};
    const auto rows = occupancy_by_distance(clouds, cyl, cubic, far);
    bool saw_undefined = false;
    for (const auto& row : rows) saw_undefined |= !row.nonempty_proportion.has_value();
    CHECK(saw_undefined);
    std::ostringstream out;
    write_occupancy_csv(out, rows);
    CHECK(out.str().rfind("scheme,distance_lo,distance_hi,nonempty_proportion\n", 0) == 0);
    CHECK(out.str().find("cylindrical,100,200,\n") != std::string::npos);
  }
}

TEST_CASE("default grids") {
  const CylGridSpec cyl;
  const CubicGridSpec cubic;
  CHECK(cyl.resolution == Shape3{480, 360, 32});
  CHECK(volume(cubic.resolution) == volume(cyl.resolution));
  CHECK(cubic.x_max - cubic.x_min == 2 * cyl.rho_max);
}
