#include "cylseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>

#include "cylseg/random.hpp"

namespace cylseg {

bool FdReport::pass() const {
  return std::all_of(blocks.begin(), blocks.end(), [](const auto& b) { return b.pass; });
}

double FdReport::max_rel_error() const {
  double e = 0.0;
  for (const auto& b : blocks) e = std::max(e, b.max_rel_error);
  return e;
}

void FdReport::print(std::ostream& out) const {
  for (const auto& b : blocks) {
    out << (b.pass ? "  ok   " : "  FAIL ") << std::left << std::setw(36) << b.name
        << " checks=" << b.checks << " rel=" << std::scientific << std::setprecision(2)
        << b.max_rel_error << (b.finite ? "" : " non-finite") << std::defaultfloat << '\n';
  }
}

FdReport finite_diff_check(const std::function<double(const TensorMap&)>& fn,
                           const TensorMap& point, const TensorMap& analytic,
                           const FdOptions& options) {
  const double step_base = std::cbrt(std::numeric_limits<double>::epsilon());
  FdReport report;
  TensorMap probe = point;
  Rng rng(options.seed);

  for (const auto& [name, tensor] : point) {
    FdBlockReport block;
    block.name = name;
    const auto ait = analytic.find(name);
    if (ait == analytic.end() || ait->second.size() != tensor.size()) {
      block.finite = false;
      report.blocks.push_back(block);
      continue;
    }
    const auto& grad = ait->second.values;
    auto& values = probe.at(name).values;
    std::vector<double> numeric, expected;

    if (tensor.size() <= options.max_coordinates) {
      for (std::size_t i = 0; i < tensor.size(); ++i) {
        const double v = tensor.values[i];
        const double h = step_base * (std::abs(v) + 1.0);
        values[i] = v + h;
        const double fp = fn(probe);
        values[i] = v - h;
        const double fm = fn(probe);
        values[i] = v;
        numeric.push_back((fp - fm) / (2.0 * h));
        expected.push_back(grad[i]);
      }
    } else {
      double vmax = 0.0;
      for (double v : tensor.values) vmax = std::max(vmax, std::abs(v));
      const double h = step_base * (vmax + 1.0);
      for (int d = 0; d < options.directions; ++d) {
        std::vector<double> dir(tensor.size());
        double norm = 0.0;
        for (double& x : dir) {
          x = rng.normal();
          norm += x * x;
        }
        norm = std::sqrt(norm);
        double jvp = 0.0;
        for (std::size_t i = 0; i < dir.size(); ++i) {
          dir[i] /= norm;
          jvp += grad[i] * dir[i];
        }
        for (std::size_t i = 0; i < dir.size(); ++i) values[i] = tensor.values[i] + h * dir[i];
        const double fp = fn(probe);
        for (std::size_t i = 0; i < dir.size(); ++i) values[i] = tensor.values[i] - h * dir[i];
        const double fm = fn(probe);
        values = tensor.values;
        numeric.push_back((fp - fm) / (2.0 * h));
        expected.push_back(jvp);
      }
    }

    double scale = options.abs_floor;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      if (!std::isfinite(numeric[i]) || !std::isfinite(expected[i])) block.finite = false;
      scale = std::max({scale, std::abs(numeric[i]), std::abs(expected[i])});
    }
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double err = std::abs(numeric[i] - expected[i]);
      block.max_abs_error = std::max(block.max_abs_error, err);
    }
    block.checks = numeric.size();
    block.max_rel_error = block.max_abs_error / scale;
    block.pass = block.finite && block.max_rel_error < options.tolerance;
    report.blocks.push_back(block);
  }
  return report;
}

}  // namespace cylseg
