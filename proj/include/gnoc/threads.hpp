#pragma once

// Deterministic worker pool: work is split into one contiguous chunk per
// worker and results are combined in chunk order, so the outcome is a pure
// function of (n_items, n_workers) regardless of scheduling.

#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

#include "gnoc/common.hpp"

namespace gnoc {

struct ChunkRange {
  std::size_t begin = 0, end = 0;
};

inline std::vector<ChunkRange> chunk_ranges(std::size_t n, int n_workers) {
  GNOC_CHECK(n_workers >= 1, ConfigError, "chunking: need at least one worker");
  const std::size_t w = std::min<std::size_t>(n_workers, std::max<std::size_t>(n, 1));
  std::vector<ChunkRange> out(w);
  const std::size_t base = n / w, extra = n % w;
  std::size_t at = 0;
  for (std::size_t i = 0; i < w; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    out[i] = {at, at + len};
    at += len;
  }
  return out;
}

// Runs fn(begin, end) once per chunk. With one worker everything stays on the
// calling thread. Exceptions from workers are rethrown (first chunk wins).
inline void parallel_chunks(std::size_t n, int n_workers,
                            const std::function<void(std::size_t, std::size_t)>& fn) {
  const auto ranges = chunk_ranges(n, n_workers);
  if (ranges.size() == 1) {
    fn(ranges[0].begin, ranges[0].end);
    return;
  }
  std::vector<std::exception_ptr> errors(ranges.size());
  std::vector<std::thread> threads;
  threads.reserve(ranges.size());
  for (std::size_t i = 0; i < ranges.size(); ++i)
    threads.emplace_back([&, i] {
      try {
        fn(ranges[i].begin, ranges[i].end);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Ordered map-reduce: computes fn(i) -> T for every i, then folds the results
// in ascending index order (combine(acc, value)), independent of thread
// timing.
template <typename T, typename Fn, typename Combine>
T parallel_map_reduce(std::size_t n, int n_workers, T init, Fn fn,
                      Combine combine) {
  std::vector<T> results(n);
  parallel_chunks(n, n_workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) results[i] = fn(i);
  });
  T acc = std::move(init);
  for (std::size_t i = 0; i < n; ++i) acc = combine(std::move(acc), std::move(results[i]));
  return acc;
}

}  // namespace gnoc
