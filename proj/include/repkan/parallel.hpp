#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace repkan {

/// Worker count from REPKAN_THREADS (0 or unset = hardware concurrency).
inline std::size_t thread_count() {
  static const std::size_t count = [] {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    const char* env = std::getenv("REPKAN_THREADS");
    if (env == nullptr || *env == '\0') return hw;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || v < 0) return hw;
    return v == 0 ? hw : static_cast<std::size_t>(v);
  }();
  return count;
}

/// Runs fn(i) for i in [0, count). Work items must write disjoint memory; the
/// result therefore does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  std::size_t workers = std::min(thread_count(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto run = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Fixed partition of [0, n) into at most `max_chunks` contiguous ranges. Depends only on n,
/// so reductions summed chunk-by-chunk in index order are identical for any thread count.
struct ChunkRange {
  std::size_t begin;
  std::size_t end;
};

inline std::vector<ChunkRange> fixed_chunks(std::size_t n, std::size_t max_chunks = 8) {
  std::vector<ChunkRange> out;
  std::size_t chunks = std::max<std::size_t>(1, std::min(n, max_chunks));
  for (std::size_t i = 0; i < chunks; ++i) out.push_back({n * i / chunks, n * (i + 1) / chunks});
  return out;
}

}  // namespace repkan
