#include "cylseg/common.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <thread>

namespace cylseg {

Tensor::Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)) {
  const std::size_t n = std::accumulate(shape.begin(), shape.end(),
                                        std::size_t{1}, std::multiplies<>());
  values.assign(n, fill);
}

TensorMap zeros_like(const TensorMap& like) {
  TensorMap out;
  for (const auto& [name, t] : like) out.emplace(name, Tensor(t.shape));
  return out;
}

namespace {
std::atomic<int> g_num_threads{1};
}

void set_num_threads(int n) { g_num_threads = std::max(1, n); }
int num_threads() { return g_num_threads; }

void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t min_chunk) {
  if (n == 0) return;
  const std::size_t max_workers = (n + min_chunk - 1) / min_chunk;
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(num_threads()), max_workers);
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(n, chunk));
}

}  // namespace cylseg
