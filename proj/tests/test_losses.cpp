#include <doctest.h>

#include <cmath>

#include "cylseg/gradcheck.hpp"
#include "cylseg/losses.hpp"
#include "cylseg/optim.hpp"
#include "cylseg/selftest.hpp"
#include "generators.hpp"

using namespace cylseg;
using doctest::Approx;

namespace {

std::vector<int32_t> random_targets(Rng& rng, std::size_t m, int k, bool with_ignore) {
  std::vector<int32_t> t(m);
  for (auto& v : t) {
    v = static_cast<int32_t>(rng.below(k));
    if (with_ignore && rng.uniform() < 0.2) v = 255;
  }
  return t;
}

// Log-sum-exp evaluated directly from the definition.
double ce_oracle(const Matrix& z, std::span<const int32_t> t, std::span<const double> w) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < z.rows; ++i) {
    if (t[i] == 255) continue;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < z.cols; ++c) mx = std::max(mx, z(i, c));
    double s = 0;
    for (std::size_t c = 0; c < z.cols; ++c) s += std::exp(z(i, c) - mx);
    num += w[t[i]] * (mx + std::log(s) - z(i, t[i]));
    den += w[t[i]];
  }
  return den > 0 ? num / den : 0.0;
}

Matrix random_probs(Rng& rng, std::size_t m, int k) {
  return softmax_rows(testing::random_matrix(rng, m, k, 2.0));
}

}  // namespace

TEST_CASE("weighted cross-entropy examples") {
  const std::vector<double> unit(4, 1.0);
  SUBCASE("uniform logits") {
    const Matrix z(5, 4, 0.3);
    const std::vector<int32_t> t{0, 1, 2, 3, 1};
    CHECK(weighted_ce(z, t, unit, 255).loss == Approx(std::log(4.0)).epsilon(1e-14));
  }
  SUBCASE("confident and correct") {
    Matrix z(1, 4);
    z(0, 2) = 100.0;
    const std::vector<int32_t> t{2};
    CHECK(weighted_ce(z, t, unit, 255).loss < 1e-40);
  }
  SUBCASE("every row ignored") {
    Rng rng(1);
    const Matrix z = testing::random_matrix(rng, 3, 4);
    const std::vector<int32_t> t{255, 255, 255};
    const LossWithGrad r = weighted_ce(z, t, unit, 255);
    CHECK(r.loss == 0.0);
    for (double g : r.grad.data) CHECK(g == 0.0);
  }
  SUBCASE("ignored rows have zero gradient") {
    Rng rng(2);
    const Matrix z = testing::random_matrix(rng, 4, 4);
    const std::vector<int32_t> t{0, 255, 3, 255};
    const LossWithGrad r = weighted_ce(z, t, unit, 255);
    for (int c = 0; c < 4; ++c) {
      CHECK(r.grad(1, c) == 0.0);
      CHECK(r.grad(3, c) == 0.0);
    }
  }
}

TEST_CASE("weighted cross-entropy matches a log-sum-exp oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(5));
    const std::size_t m = 1 + rng.below(12);
    const Matrix z = testing::random_matrix(rng, m, k, 3.0);
    const auto t = random_targets(rng, m, k, true);
    std::vector<double> w(k);
    for (double& v : w) v = rng.uniform(0.1, 3.0);
    const double got = weighted_ce(z, t, w, 255).loss;
    CHECK(std::abs(got - ce_oracle(z, t, w)) < 1e-12);
    CHECK(got >= 0.0);
    // Scaling every weight leaves the loss unchanged.
    std::vector<double> scaled = w;
    for (double& v : scaled) v *= 7.5;
    CHECK(weighted_ce(z, t, scaled, 255).loss == Approx(got).epsilon(1e-12));
  }
}

TEST_CASE("lovasz softmax examples") {
  SUBCASE("one row, two classes") {
    Matrix p(1, 2);
    p(0, 0) = 0.3;
    p(0, 1) = 0.7;
    const std::vector<int32_t> t{0};
    CHECK(lovasz_softmax(p, t, 255).loss == Approx(0.7).epsilon(1e-15));
  }
  SUBCASE("perfect predictions are exactly zero") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t m = 1 + rng.below(10);
      const auto t = random_targets(rng, m, 3, false);
      Matrix p(m, 3);
      for (std::size_t i = 0; i < m; ++i) p(i, t[i]) = 1.0;
      CHECK(lovasz_softmax(p, t, 255).loss == 0.0);
    }
  }
  SUBCASE("no usable rows") {
    const Matrix p(2, 3, 1.0 / 3.0);
    const std::vector<int32_t> t{255, 255};
    CHECK(lovasz_softmax(p, t, 255).loss == 0.0);
  }
  SUBCASE("class loss of a single foreground error") {
    const std::vector<double> e{0.4};
    const std::vector<uint8_t> fg{1};
    CHECK(lovasz_class_loss(e, fg) == Approx(0.4));
  }
}

TEST_CASE("lovasz softmax equals the brute-force extension") {
  const LovaszSuiteStats s = lovasz_suite(300, 5);
  CHECK(s.instances == 300);
  CHECK(s.max_abs_error < 1e-10);
  CHECK(s.perfect_is_zero);
}

TEST_CASE("lovasz softmax range and monotonicity") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng.below(8);
    const int k = 2 + static_cast<int>(rng.below(3));
    Matrix p = random_probs(rng, m, k);
    const auto t = random_targets(rng, m, k, false);
    const double base = lovasz_softmax(p, t, 255).loss;
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);
    // Move mass from the other classes to the true class of one row.
    const std::size_t i = rng.below(m);
    const double alpha = rng.uniform(0.0, 1.0);
    for (int c = 0; c < k; ++c) {
      p(i, c) = c == t[i] ? p(i, c) + alpha * (1.0 - p(i, c)) : (1.0 - alpha) * p(i, c);
    }
    CHECK(lovasz_softmax(p, t, 255).loss <= base + 1e-12);
  }
}

TEST_CASE("loss gradients pass finite differences") {
  Rng rng(7);
  const std::size_t m = 7;
  const int k = 3;
  const Matrix z = testing::random_matrix(rng, m, k);
  const auto t = random_targets(rng, m, k, true);
  const std::vector<double> w{0.5, 1.0, 2.0};
  TensorMap point;
  point["z"] = Tensor({m, static_cast<std::size_t>(k)});
  point["z"].values = z.data;
  const auto check = [&](auto loss_of) {
    const auto f = [&](const TensorMap& tm) {
      Matrix zz = z;
      zz.data = tm.at("z").values;
      return loss_of(zz).loss;
    };
    TensorMap analytic = zeros_like(point);
    analytic["z"].values = loss_of(z).grad.data;
    return finite_diff_check(f, point, analytic);
  };
  CHECK(check([&](const Matrix& zz) { return weighted_ce(zz, t, w, 255); }).pass());
  CHECK(check([&](const Matrix& zz) {
          const Matrix p = softmax_rows(zz);
          LossWithGrad r = lovasz_softmax(p, t, 255);
          r.grad = softmax_backward(r.grad, p);
          return r;
        }).pass());
}

TEST_CASE("total loss bookkeeping") {
  Rng rng(8);
  const Matrix vz = testing::random_matrix(rng, 6, 3);
  const Matrix pz = testing::random_matrix(rng, 10, 3);
  const auto vt = random_targets(rng, 6, 3, true);
  const auto pt = random_targets(rng, 10, 3, true);
  const std::vector<double> w{1.0, 2.0, 0.5};
  const TotalLoss l = total_loss(vz, vt, pz, pt, w, 255);
  CHECK(l.report.total == l.report.l_voxel_ce + l.report.l_voxel_lovasz + l.report.l_point_ce);
  CHECK(l.report.l_voxel_ce == weighted_ce(vz, vt, w, 255).loss);
  CHECK(l.report.l_point_ce == weighted_ce(pz, pt, w, 255).loss);
  CHECK(l.grad_voxel_logits.rows == 6);
  CHECK(l.grad_point_logits.rows == 10);

  const TotalLoss half = total_loss(vz, vt, pz, pt, w, 255, {0.5, 0.0, 2.0});
  CHECK(half.report.l_voxel_lovasz == l.report.l_voxel_lovasz);
  CHECK(half.report.total ==
        Approx(0.5 * l.report.l_voxel_ce + 2.0 * l.report.l_point_ce).epsilon(1e-14));

  Matrix perfect_v(6, 3, -60.0), perfect_p(10, 3, -60.0);
  for (int i = 0; i < 6; ++i) perfect_v(i, vt[i] == 255 ? 0 : vt[i]) = 60.0;
  for (int i = 0; i < 10; ++i) perfect_p(i, pt[i] == 255 ? 0 : pt[i]) = 60.0;
  CHECK(total_loss(perfect_v, vt, perfect_p, pt, w, 255).report.total < 1e-40);
}

TEST_CASE("class weights from counts") {
  const std::vector<uint64_t> counts{60, 30, 10, 0};
  const auto w = class_weights_from_counts(counts);
  REQUIRE(w.size() == 4);
  CHECK(w[0] == Approx(1.0 / std::sqrt(0.6 + 1e-3)));
  CHECK(w[1] == Approx(1.0 / std::sqrt(0.3 + 1e-3)));
  CHECK(w[3] == Approx(1.0 / std::sqrt(1e-3)));
  CHECK(w[0] < w[1]);
  CHECK(w[1] < w[2]);
}

TEST_CASE("adam step") {
  SUBCASE("first step matches the bias-corrected formula") {
    TensorMap p{{"a", Tensor({3})}};
    p["a"].values = {1.0, -2.0, 0.5};
    TensorMap g{{"a", Tensor({3})}};
    g["a"].values = {0.2, -3.0, 0.0};
    AdamState s;
    adam_step(p, g, s);
    CHECK(s.step == 1);
    for (int i = 0; i < 3; ++i) {
      const double gi = g["a"].values[i];
      const double expected = (i == 0 ? 1.0 : i == 1 ? -2.0 : 0.5) -
                              1e-3 * gi / (std::abs(gi) + 1e-8);
      CHECK(p["a"].values[i] == Approx(expected).epsilon(1e-14));
    }
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    TensorMap p{{"a", Tensor({2}, 3.0)}};
    const TensorMap before = p;
    AdamState s;
    for (int i = 0; i < 5; ++i) adam_step(p, zeros_like(p), s);
    CHECK(p == before);
  }
  SUBCASE("identical runs give identical trajectories") {
    const auto run = [] {
      Rng rng(9);
      TensorMap p{{"a", Tensor({4})}, {"b", Tensor({2, 2})}};
      AdamState s;
      for (int step = 0; step < 20; ++step) {
        TensorMap g = zeros_like(p);
        for (auto& [n, t] : g) {
          for (double& v : t.values) v = rng.normal();
        }
        adam_step(p, g, s);
      }
      return p;
    };
    CHECK(run() == run());
  }
  SUBCASE("shape mismatch") {
    TensorMap p{{"a", Tensor({2})}};
    AdamState s;
    CHECK_THROWS_AS(adam_step(p, {{"a", Tensor({3})}}, s), ShapeError);
    CHECK_THROWS_AS(adam_step(p, {}, s), ShapeError);
  }
}

TEST_CASE("finite difference harness") {
  TensorMap point{{"x", Tensor({3})}, {"y", Tensor({2, 2})}};
  point["x"].values = {1.0, -2.0, 0.5};
  point["y"].values = {0.3, 0.1, -0.7, 2.0};
  const auto f = [](const TensorMap& t) {
    double s = 0;
    for (double v : t.at("x").values) s += 3.0 * v * v;
    const auto& y = t.at("y").values;
    return s + y[0] * y[3] - 0.5 * y[1] * y[1];
  };
  TensorMap grad = zeros_like(point);
  for (int i = 0; i < 3; ++i) grad["x"].values[i] = 6.0 * point["x"].values[i];
  grad["y"].values = {2.0, -0.1, 0.0, 0.3};
  SUBCASE("quadratic") {
    const FdReport r = finite_diff_check(f, point, grad);
    CHECK(r.pass());
    CHECK(r.max_rel_error() < 1e-9);
    CHECK(r.blocks.size() == 2);
  }
  SUBCASE("corrupted gradient fails") {
    grad["y"].values[2] = 0.01;
    const FdReport r = finite_diff_check(f, point, grad);
    CHECK_FALSE(r.pass());
  }
  SUBCASE("non-finite output is flagged") {
    const auto bad = [](const TensorMap& t) { return std::log(t.at("x").values[0] - 1.0); };
    const FdReport r = finite_diff_check(bad, point, grad);
    CHECK_FALSE(r.pass());
    bool any_nonfinite = false;
    for (const auto& b : r.blocks) any_nonfinite |= !b.finite;
    CHECK(any_nonfinite);
  }
}
