#include "attnprof/numkernel/parallel.hpp"

#include <atomic>

namespace attnprof::nk {
namespace {
std::atomic<int> configured_threads{1};
}

void set_thread_count(int threads) { configured_threads.store(std::max(1, threads)); }
int thread_count() { return configured_threads.load(); }

}  // namespace attnprof::nk
