#include "cylseg/optim.hpp"

#include <cmath>

namespace cylseg {

void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state) {
  for (const auto& [name, p] : params) {
    const auto it = grads.find(name);
    if (it == grads.end() || it->second.shape != p.shape) {
      throw ShapeError("missing or mis-shaped gradient for " + name);
    }
  }
  if (state.first_moment.empty()) {
    state.first_moment = zeros_like(params);
    state.second_moment = zeros_like(params);
  }
  ++state.step;
  const auto& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name).values;
    auto& m = state.first_moment.at(name).values;
    auto& v = state.second_moment.at(name).values;
    if (m.size() != p.values.size()) throw ShapeError("optimizer state mismatch for " + name);
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p.values[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.epsilon);
    }
  }
}

}  // namespace cylseg
