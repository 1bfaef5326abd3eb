#include "rtsal/common.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <thread>

namespace rtsal {

namespace {
std::atomic<Precision> g_precision{Precision::f64};
std::atomic<bool> g_debug_checks{false};
}  // namespace

void set_precision(Precision p) { g_precision.store(p); }

Precision active_precision() { return g_precision.load(); }

void set_debug_checks(bool enabled) { g_debug_checks.store(enabled); }

bool debug_checks_enabled() { return g_debug_checks.load(); }

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& body) {
  if (n <= 0) return;
  if (threads <= 1 || n == 1) {
    for (int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  const int workers = static_cast<int>(std::min<int64_t>(threads, n));
  const int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (int w = 0; w < workers; ++w) {
    const int64_t lo = w * chunk;
    const int64_t hi = std::min<int64_t>(n, lo + chunk);
    pool.emplace_back([&, lo, hi] {
      try {
        for (int64_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace rtsal
