#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "cylseg/pointcloud.hpp"
#include "generators.hpp"

namespace fs = std::filesystem;
using namespace cylseg;

namespace {

// Byte-level encoder written independently of the library writer.
void append_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void append_f32(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  append_u32(out, bits);
}

fs::path temp_file(const std::string& name, const std::string& bytes) {
  const fs::path dir = fs::temp_directory_path() / "cylseg_tests";
  fs::create_directories(dir);
  const fs::path p = dir / name;
  std::ofstream(p, std::ios::binary)
      .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("read_kitti_bin decodes little-endian float quadruples") {
  SUBCASE("empty file") {
    const PointCloud c = read_kitti_bin(temp_file("empty.bin", ""));
    CHECK(c.size() == 0);
    CHECK(c.intensity.empty());
  }
  SUBCASE("two points in order") {
    std::string bytes;
    for (float f : {1.0f, 2.0f, 3.0f, 0.5f, -1.0f, 0.0f, 2.0f, 0.25f}) append_f32(bytes, f);
    const PointCloud c = read_kitti_bin(temp_file("two.bin", bytes));
    REQUIRE(c.size() == 2);
    CHECK(c.xyz[0] == Point3{1, 2, 3});
    CHECK(c.intensity[0] == 0.5);
    CHECK(c.xyz[1] == Point3{-1, 0, 2});
    CHECK(c.intensity[1] == 0.25);
    CHECK_FALSE(c.has_labels());
  }
  SUBCASE("17 bytes is rejected") {
    CHECK_THROWS_AS(read_kitti_bin(temp_file("bad.bin", std::string(17, '\0'))), FormatError);
  }
  SUBCASE("missing path") {
    CHECK_THROWS_AS(read_kitti_bin("/nonexistent/cylseg/x.bin"), Error);
  }
}

TEST_CASE("kitti bin round trip is byte exact") {
  Rng rng(11);
  std::string bytes;
  for (int i = 0; i < 64 * 4; ++i) append_f32(bytes, static_cast<float>(rng.uniform(-80, 80)));
  const fs::path in = temp_file("rt_in.bin", bytes);
  const fs::path out = fs::temp_directory_path() / "cylseg_tests" / "rt_out.bin";
  write_kitti_bin(out, read_kitti_bin(in));
  CHECK(slurp(out) == bytes);
}

TEST_CASE("read_kitti_labels masks the lower 16 bits and remaps") {
  LabelMap map;
  map.num_classes = 3;
  map.raw_to_train = {{0, 255}, {5, 2}};
  std::string bytes;
  append_u32(bytes, 0x00000000u);
  append_u32(bytes, 0x000A0005u);
  append_u32(bytes, 0x00000007u);  // unknown raw id
  const auto labels = read_kitti_labels(temp_file("l.label", bytes), map);
  REQUIRE(labels.size() == 3);
  CHECK(labels[0] == 255);
  CHECK(labels[1] == 2);
  CHECK(labels[2] == 255);
  CHECK_THROWS_AS(read_kitti_labels(temp_file("bad.label", std::string(6, '\0')), map),
                  FormatError);
}

TEST_CASE("upper 16 label bits never change the decoded id") {
  const LabelMap map = LabelMap::semantic_kitti();
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const uint32_t raw = static_cast<uint32_t>(rng.below(300));
    std::string plain, tagged;
    append_u32(plain, raw);
    append_u32(tagged, raw | (static_cast<uint32_t>(rng.below(0xFFFF) + 1) << 16));
    CHECK(read_kitti_labels(temp_file("p.label", plain), map) ==
          read_kitti_labels(temp_file("t.label", tagged), map));
  }
}

TEST_CASE("label writer emits raw ids through the inverse map") {
  const LabelMap map = LabelMap::semantic_kitti();
  std::vector<int32_t> train(19);
  for (int i = 0; i < 19; ++i) train[i] = i;
  const fs::path p = fs::temp_directory_path() / "cylseg_tests" / "inv.label";
  write_kitti_labels(p, train, map);
  CHECK(read_kitti_labels(p, map) == train);
  const std::string bytes = slurp(p);
  uint32_t first;
  std::memcpy(&first, bytes.data(), 4);
  CHECK(first == 10u);  // car
}

TEST_CASE("label maps") {
  const LabelMap kitti = LabelMap::semantic_kitti();
  CHECK(kitti.num_classes == 19);
  CHECK(kitti.to_train(0) == kitti.ignore_id);
  CHECK(kitti.to_train(10) == 0);
  CHECK(kitti.to_train(252) == 0);   // moving car merges into car
  CHECK(kitti.to_train(12345) == kitti.ignore_id);
  for (int32_t t = 0; t < 19; ++t) CHECK(kitti.to_train(kitti.to_raw(t)) == t);
  CHECK_NOTHROW(kitti.validate());

  LabelMap bad = LabelMap::identity(2);
  bad.raw_to_train[9] = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  LabelMap fallback;
  fallback.num_classes = 2;
  fallback.raw_to_train = {{40, 1}, {30, 1}, {5, 0}};
  CHECK(fallback.to_raw(1) == 30u);  // smallest raw id mapping to the class
}

TEST_CASE("synthetic scenes") {
  SyntheticSceneSpec spec;
  spec.seed = 42;
  spec.num_points = 10000;
  const PointCloud a = generate_synthetic_scene(spec);
  const PointCloud b = generate_synthetic_scene(spec);
  CHECK(a.xyz == b.xyz);
  CHECK(a.intensity == b.intensity);
  CHECK(a.labels == b.labels);
  REQUIRE(a.size() == 10000);
  REQUIRE(a.has_labels());
  CHECK_NOTHROW(a.validate(kSyntheticClasses, 255));

  std::vector<int> per_class(kSyntheticClasses, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::hypot(a.xyz[i].x, a.xyz[i].y) <= spec.max_range);
    CHECK(a.intensity[i] >= 0.0);
    CHECK(a.intensity[i] <= 1.0);
    ++per_class[(*a.labels)[i]];
  }
  for (int c : per_class) CHECK(c > 0);

  spec.seed = 43;
  CHECK(generate_synthetic_scene(spec).xyz != a.xyz);

  spec.num_points = 0;
  CHECK_THROWS_AS(generate_synthetic_scene(spec), ConfigError);
}

TEST_CASE("synthetic density falls with range") {
  double inner = 0, outer = 0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    SyntheticSceneSpec spec;
    spec.seed = seed;
    const PointCloud c = generate_synthetic_scene(spec);
    for (const auto& p : c.xyz) {
      const double r = std::hypot(p.x, p.y);
      if (r >= 5 && r < 10) inner += 1;
      if (r >= 40 && r < 45) outer += 1;
    }
  }
  const double inner_area = 100.0 - 25.0;
  const double outer_area = 45.0 * 45.0 - 40.0 * 40.0;
  CHECK(inner / inner_area > outer / outer_area);
}

TEST_CASE("point cloud validation and permutation") {
  Rng rng(5);
  PointCloud c = testing::random_cloud(rng, 30, 10, -1, 1, 3);
  CHECK_NOTHROW(c.validate(3, 255));
  const auto order = testing::random_permutation(rng, 30);
  const PointCloud p = c.permuted(order);
  for (std::size_t i = 0; i < 30; ++i) {
    CHECK(p.xyz[i] == c.xyz[order[i]]);
    CHECK((*p.labels)[i] == (*c.labels)[order[i]]);
  }
  (*c.labels)[3] = 9;
  CHECK_THROWS_AS(c.validate(3, 255), ShapeError);
  c.intensity.pop_back();
  CHECK_THROWS_AS(c.validate(), ShapeError);
}
