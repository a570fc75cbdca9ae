#include "hyperconv/parallel.hpp"

#include <cstdlib>
#include <thread>
#include <vector>

namespace hyperconv {

int thread_count() {
  static const int cached = [] {
    const char* env = std::getenv("HYPERCONV_THREADS");
    if (env == nullptr) return 1;
    int v = std::atoi(env);
    if (v < 1) return 1;
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw > 0 && v > hw) v = hw;
    return v;
  }();
  return cached;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
  const int workers = thread_count();
  if (workers <= 1 || n < 2 * workers) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace hyperconv
