#include <doctest.h>

#include <cmath>
#include <numbers>

#include "cylseg/network.hpp"
#include "cylseg/selftest.hpp"
#include "generators.hpp"

using namespace cylseg;
using doctest::Approx;

namespace {

NetworkConfig toy_config(BlockVariant v = BlockVariant::asym) {
  NetworkConfig c;
  c.num_classes = 3;
  c.base_channels = 4;
  c.num_stages = 2;
  c.point_mlp_widths = {8};
  c.block_variant = v;
  c.grid.rho_max = 20.0;
  c.grid.resolution = {16, 16, 8};
  return c;
}

PointCloud toy_cloud(uint64_t seed, int n = 300) {
  Rng rng(seed);
  return testing::random_cloud(rng, n, 14.0, -3.5, 1.5, 3);
}

void zero_all(TensorMap& m) {
  for (auto& [name, t] : m) std::fill(t.values.begin(), t.values.end(), 0.0);
}

}  // namespace

TEST_CASE("asymmetric block uses exactly 2/3 of the regular block's conv weights") {
  for (int c : {1, 4, 16, 32}) {
    const ResBlock asym("a", BlockVariant::asym, c, c);
    const ResBlock reg("r", BlockVariant::regular, c, c);
    const ResBlock a1d("d", BlockVariant::asym1d, c, c);
    CHECK(asym.conv_weight_count() * 3 == reg.conv_weight_count() * 2);
    CHECK(asym.conv_weight_count() == 36u * c * c);
    CHECK(a1d.conv_weight_count() < asym.conv_weight_count());
  }
  const Network a(toy_config(BlockVariant::asym));
  const Network r(toy_config(BlockVariant::regular));
  const Network d(toy_config(BlockVariant::asym1d));
  CHECK(d.conv_weight_count() < a.conv_weight_count());
  CHECK(a.conv_weight_count() < r.conv_weight_count());
}

TEST_CASE("all block variants produce the same output sites") {
  const PointCloud cloud = toy_cloud(1);
  std::vector<ForwardResult> out;
  for (BlockVariant v : {BlockVariant::asym, BlockVariant::asym1d, BlockVariant::regular}) {
    const Network net(toy_config(v));
    out.push_back(net.forward(cloud, net.init_params(0), false));
  }
  for (const auto& r : out) {
    CHECK(r.voxel_logits.coords == out[0].voxel_logits.coords);
    CHECK(r.voxel_logits.channels() == 3);
    CHECK(r.point_logits.rows == cloud.size());
    CHECK(r.point_logits.cols == 3);
  }
}

TEST_CASE("res block with zero conv weights reduces to its shortcut") {
  const SparseTensor x = random_sparse_tensor({6, 6, 6}, 4, 0.3, 3);
  for (BlockVariant v : {BlockVariant::regular, BlockVariant::asym, BlockVariant::asym1d}) {
    const ResBlock block("blk", v, 4, 4);
    ModelParams p;
    Rng rng(1);
    block.declare(p, rng);
    for (auto& [name, t] : p.weights) {
      if (name.ends_with(".w")) std::fill(t.values.begin(), t.values.end(), 0.0);
    }
    RulebookCache books(x.coords, x.spatial_shape);
    const ForwardContext ctx{true, 0.1, 1e-5, nullptr};
    ResBlock::Cache cache;
    const SparseTensor y = block.forward(p, x, books, ctx, cache);
    REQUIRE(y.coords == x.coords);
    for (std::size_t i = 0; i < x.features.data.size(); ++i) {
      const double v_in = x.features.data[i];
      const double expected = v == BlockVariant::regular ? (v_in >= 0 ? v_in : 0.1 * v_in) : 0.0;
      CHECK(y.features.data[i] == Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("ddcm gates scale features by at most three") {
  const Ddcm ddcm("g", 4);
  ModelParams p;
  Rng rng(2);
  ddcm.declare(p, rng);
  const ForwardContext ctx{true, 0.1, 1e-5, nullptr};
  SparseTensor x = random_sparse_tensor({8, 8, 8}, 4, 0.2, 4);
  RulebookCache books(x.coords, x.spatial_shape);
  Ddcm::Cache cache;
  const SparseTensor y = ddcm.forward(p, x, books, ctx, cache);
  for (std::size_t i = 0; i < x.features.data.size(); ++i) {
    CHECK(std::abs(y.features.data[i]) <= 3.0 * std::abs(x.features.data[i]));
    CHECK(std::signbit(y.features.data[i]) == std::signbit(x.features.data[i]));
  }
  std::fill(x.features.data.begin(), x.features.data.end(), 0.0);
  Ddcm::Cache cache0;
  for (double v : ddcm.forward(p, x, books, ctx, cache0).features.data) CHECK(v == 0.0);
}

TEST_CASE("point input features") {
  CylGridSpec grid;
  grid.rho_max = 20.0;
  grid.resolution = {20, 36, 6};
  const auto size = grid.cell_size();
  Rng rng(5);
  PointCloud cloud = testing::random_cloud(rng, 200, 14.0, -3.9, 1.9);
  // A point exactly at a cell center has zero offsets.
  const auto center = grid.cell_center({7, 9, 2});
  cloud.xyz.push_back(cyl_to_cart({center[0], center[1], center[2]}));
  cloud.intensity.push_back(0.75);
  const VoxelMapping m = assign_cells(cloud, grid);
  const Matrix f = point_input_features(cloud, m, grid);
  REQUIRE(f.cols == 9);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const CylPoint c = cart_to_cyl(cloud.xyz[i].x, cloud.xyz[i].y, cloud.xyz[i].z);
    for (int a = 0; a < 3; ++a) CHECK(std::abs(f(i, a)) <= 0.5 * size[a] + 1e-9);
    CHECK(f(i, 3) == Approx(c.rho));
    CHECK(f(i, 4) == Approx(c.theta));
    CHECK(f(i, 5) == Approx(c.z));
    CHECK(f(i, 6) == cloud.xyz[i].x);
    CHECK(f(i, 7) == cloud.xyz[i].y);
    CHECK(f(i, 8) == cloud.intensity[i]);
  }
  const std::size_t last = cloud.size() - 1;
  for (int a = 0; a < 3; ++a) CHECK(std::abs(f(last, a)) < 1e-9);
  const Matrix no_i = point_input_features(cloud, m, grid, false);
  for (std::size_t i = 0; i < cloud.size(); ++i) CHECK(no_i(i, 8) == 0.0);
}

TEST_CASE("point mlp with zero weights outputs zeros") {
  const PointMlp mlp("mlp", 9, {8, 4});
  ModelParams p;
  Rng rng(6);
  mlp.declare(p, rng);
  zero_all(p.weights);
  Rng data(7);
  const Matrix x = testing::random_matrix(data, 50, 9);
  PointMlp::Cache cache;
  const Matrix y = mlp.forward(p, x, {true, 0.1, 1e-5, nullptr}, cache);
  CHECK(y.rows == 50);
  CHECK(y.cols == 4);
  for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("refine head maps identical inputs to identical logits") {
  const PointRefine refine("ref", 4, 4, 3);
  ModelParams p;
  Rng rng(8);
  refine.declare(p, rng);
  Rng data(9);
  const Matrix voxel = testing::random_matrix(data, 2, 4);
  Matrix point = testing::random_matrix(data, 3, 4);
  for (int c = 0; c < 4; ++c) point(2, c) = point(0, c);
  const std::vector<int32_t> site{0, 1, 0};
  PointRefine::Cache cache;
  const Matrix y = refine.forward(p, voxel, point, site, {false, 0.1, 1e-5, nullptr}, cache);
  for (int c = 0; c < 3; ++c) CHECK(y(0, c) == y(2, c));
}

TEST_CASE("network forward edge cases") {
  const Network net(toy_config());
  const ModelParams params = net.init_params(3);
  PointCloud one;
  one.xyz = {{5.0, 1.0, 0.0}};
  one.intensity = {0.3};
  const ForwardResult r = net.forward(one, params, true);
  CHECK(r.voxel_logits.size() == 1);
  CHECK(r.point_logits.rows == 1);
  for (double v : r.point_logits.data) CHECK(std::isfinite(v));
  CHECK_NOTHROW(net.forward(one, params, false));
  CHECK(predict_labels(r.point_logits).size() == 1);
}

TEST_CASE("point predictions follow a permutation of the input") {
  const Network net(toy_config());
  const ModelParams params = net.init_params(4);
  const PointCloud cloud = toy_cloud(10, 250);
  Rng rng(11);
  const auto order = testing::random_permutation(rng, cloud.size());
  const PointCloud shuffled = cloud.permuted(order);
  const ForwardResult a = net.forward(cloud, params, false);
  const ForwardResult b = net.forward(shuffled, params, false);
  CHECK(a.voxel_logits.coords == b.voxel_logits.coords);
  for (std::size_t i = 0; i < a.voxel_logits.features.data.size(); ++i) {
    CHECK(b.voxel_logits.features.data[i] ==
          Approx(a.voxel_logits.features.data[i]).epsilon(1e-9));
  }
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      CHECK(b.point_logits(i, c) == Approx(a.point_logits(order[i], c)).epsilon(1e-9));
    }
  }
}

TEST_CASE("inference is deterministic and thread-count independent") {
  const Network net(toy_config());
  const ModelParams params = net.init_params(5);
  const PointCloud cloud = toy_cloud(12, 400);
  set_num_threads(1);
  const ForwardResult a = net.forward(cloud, params, false);
  const ForwardResult b = net.forward(cloud, params, false);
  set_num_threads(3);
  const ForwardResult c = net.forward(cloud, params, false);
  ForwardTrace trace;
  const ForwardResult d = net.forward(cloud, params, true, &trace);
  Matrix gv(d.voxel_logits.size(), 3, 0.1), gp(d.point_logits.rows, 3, -0.2);
  const TensorMap g3 = net.backward(params, trace, gv, gp);
  set_num_threads(1);
  ForwardTrace trace1;
  net.forward(cloud, params, true, &trace1);
  const TensorMap g1 = net.backward(params, trace1, gv, gp);
  CHECK(a.point_logits == b.point_logits);
  CHECK(a.point_logits == c.point_logits);
  CHECK(a.voxel_logits.features == c.voxel_logits.features);
  CHECK(g1 == g3);
}

TEST_CASE("training forward records and commits batch statistics") {
  const Network net(toy_config());
  ModelParams params = net.init_params(6);
  const ModelParams before = params;
  ForwardTrace trace;
  net.forward(toy_cloud(13), params, true, &trace);
  CHECK_FALSE(trace.norm_updates.empty());
  net.commit_running_stats(params, trace);
  CHECK(params.weights == before.weights);
  CHECK(params.buffers != before.buffers);
}

TEST_CASE("init_params is a pure function of the seed") {
  const Network net(toy_config());
  CHECK(net.init_params(7) == net.init_params(7));
  CHECK(net.init_params(7).weights != net.init_params(8).weights);
}

TEST_CASE("network config text round trip and validation") {
  NetworkConfig c = toy_config(BlockVariant::asym1d);
  c.point_mlp_widths = {16, 32};
  c.grid.z_min = -3.3000000000000003;
  c.use_intensity = false;
  CHECK(NetworkConfig::from_text(c.to_text()) == c);
  CHECK_THROWS_AS(NetworkConfig::from_text("bogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(block_variant_from_string("diagonal"), ConfigError);

  NetworkConfig bad = toy_config();
  bad.num_classes = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_config();
  bad.grid.resolution = {16, 16, 6};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_config();
  bad.norm_momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("predict_labels is a row argmax") {
  Matrix m(3, 3);
  m.data = {0.1, 0.5, 0.2, 3, -1, 2, -5, -4, -4.5};
  CHECK(predict_labels(m) == std::vector<int32_t>{1, 0, 1});
}
