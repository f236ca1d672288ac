#pragma once

#include <algorithm>
#include <cstdint>
#include <thread>
#include <vector>

namespace attnprof::nk {

// Worker count used by data-parallel kernels. Fixed per run and recorded in
// every profile record; results are bit-identical for any value because work
// is split over independent output rows.
void set_thread_count(int threads);
int thread_count();

// Calls fn(lo, hi) over disjoint chunks of [begin, end). Runs inline when
// there is one worker or the range is smaller than `grain`.
template <typename Fn>
void parallel_for(std::int64_t begin, std::int64_t end, std::int64_t grain, Fn&& fn) {
  std::int64_t n = end - begin;
  if (n <= 0) return;
  int workers = thread_count();
  if (workers <= 1 || n < 2 * std::max<std::int64_t>(grain, 1)) {
    fn(begin, end);
    return;
  }
  std::int64_t chunks = std::min<std::int64_t>(workers, n / std::max<std::int64_t>(grain, 1));
  std::int64_t step = (n + chunks - 1) / chunks;
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(chunks - 1));
  for (std::int64_t c = 1; c < chunks; ++c) {
    std::int64_t lo = begin + c * step;
    std::int64_t hi = std::min(end, lo + step);
    if (lo < hi) pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(begin, std::min(end, begin + step));
}

}  // namespace attnprof::nk
