#include "segaware/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace segaware {

std::size_t worker_count() {
  static const std::size_t cached = [] {
    std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SEGAWARE_THREADS")) {
      char* end = nullptr;
      unsigned long v = std::strtoul(env, &end, 10);
      if (end != env && v >= 1) n = std::min<std::size_t>(n, v);
    }
    return n;
  }();
  return cached;
}

void parallel_for_rows(std::size_t rows, const std::function<void(std::size_t, std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), rows);
  if (workers <= 1 || rows < 64) {
    fn(0, rows);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (rows + workers - 1) / workers;
  for (std::size_t t = 1; t < workers; ++t) {
    const std::size_t b = std::min(rows, t * chunk);
    const std::size_t e = std::min(rows, (t + 1) * chunk);
    if (b < e) pool.emplace_back([&, b, e] { fn(b, e); });
  }
  fn(0, std::min(rows, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace segaware
