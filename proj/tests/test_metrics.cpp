#include <doctest.h>

#include <sstream>

#include "cylseg/metrics.hpp"
#include "generators.hpp"

using namespace cylseg;
using doctest::Approx;

TEST_CASE("confusion updates") {
  ConfusionMatrix cm(3, 255);
  const std::vector<int32_t> t{0, 1, 2, 255, 1};
  const std::vector<int32_t> p{0, 2, 2, 1, 2};
  cm.update(t, p);
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(1, 2) == 2);
  CHECK(cm.at(2, 2) == 1);
  uint64_t total = 0;
  for (uint64_t v : cm.counts()) total += v;
  CHECK(total == 4);

  const std::vector<int32_t> bad{3};
  const std::vector<int32_t> ok{0};
  CHECK_THROWS_AS(cm.update(bad, ok), ShapeError);
  CHECK_THROWS_AS(cm.update(ok, bad), ShapeError);
  CHECK_THROWS_AS(cm.update(t, ok), ShapeError);
}

TEST_CASE("diagonal updates give perfect IoU") {
  ConfusionMatrix cm(4, 255);
  const std::vector<int32_t> t{0, 1, 2, 3, 3, 2};
  cm.update(t, t);
  const MiouResult r = compute_miou(cm);
  for (const auto& v : r.iou) CHECK(*v == 1.0);
  CHECK(*r.miou == 1.0);
}

TEST_CASE("compute_miou hand example and exclusion") {
  ConfusionMatrix cm(2, 255);
  cm.update(std::vector<int32_t>{0, 0, 1}, std::vector<int32_t>{0, 1, 1});
  MiouResult r = compute_miou(cm);
  CHECK(*r.iou[0] == 0.5);
  CHECK(*r.iou[1] == 0.5);
  CHECK(*r.miou == 0.5);

  ConfusionMatrix absent(3, 255);
  absent.update(std::vector<int32_t>{0, 0, 1}, std::vector<int32_t>{0, 1, 1});
  r = compute_miou(absent);
  CHECK_FALSE(r.iou[2].has_value());
  CHECK(*r.miou == 0.5);

  CHECK_FALSE(compute_miou(ConfusionMatrix(3, 255)).miou.has_value());
}

TEST_CASE("merging equals sequential updates and order does not matter") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(5));
    std::vector<std::vector<int32_t>> truth(4), pred(4);
    for (int b = 0; b < 4; ++b) {
      const std::size_t n = rng.below(30);
      for (std::size_t i = 0; i < n; ++i) {
        truth[b].push_back(rng.uniform() < 0.1 ? 255 : static_cast<int32_t>(rng.below(k)));
        pred[b].push_back(static_cast<int32_t>(rng.below(k)));
      }
    }
    ConfusionMatrix seq(k, 255), merged(k, 255), reversed(k, 255);
    for (int b = 0; b < 4; ++b) {
      seq.update(truth[b], pred[b]);
      ConfusionMatrix part(k, 255);
      part.update(truth[b], pred[b]);
      merged.merge(part);
    }
    for (int b = 3; b >= 0; --b) reversed.update(truth[b], pred[b]);
    CHECK(seq == merged);
    CHECK(seq == reversed);
    CHECK(compute_miou(seq).miou == compute_miou(reversed).miou);
  }
  ConfusionMatrix a(2, 255), b(3, 255);
  CHECK_THROWS_AS(a.merge(b), ShapeError);
}

TEST_CASE("IoU table prints percentages with one decimal") {
  ConfusionMatrix cm(3, 255);
  cm.update(std::vector<int32_t>{0, 0, 1}, std::vector<int32_t>{0, 1, 1});
  std::ostringstream s;
  const std::vector<std::string> names{"road", "car", "tree"};
  print_iou_table(s, compute_miou(cm), names);
  const std::string text = s.str();
  CHECK(text.find("road") != std::string::npos);
  CHECK(text.find("50.0") != std::string::npos);
  CHECK(text.find("tree") != std::string::npos);
  CHECK(text.find("n/a") != std::string::npos);
  CHECK(text.find("mIoU") != std::string::npos);

  ConfusionMatrix perfect(2, 255);
  perfect.update(std::vector<int32_t>{0, 1}, std::vector<int32_t>{0, 1});
  std::ostringstream p;
  print_iou_table(p, compute_miou(perfect));
  CHECK(p.str().find("100.0") != std::string::npos);
  CHECK(p.str().find("class_1") != std::string::npos);
}
