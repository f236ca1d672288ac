#include "attnprof/numkernel/counters.hpp"

namespace attnprof::nk {
namespace {
thread_local CountingScope* active = nullptr;

LayerTag attribution() { return current_tag().value_or(LayerTag{TagKind::Other, 0}); }
}  // namespace

CountingScope::CountingScope() : previous_(active) { active = this; }
CountingScope::~CountingScope() { active = previous_; }

OpTally CountingScope::total() const {
  OpTally t;
  for (const auto& [tag, tally] : tallies_) t += tally;
  return t;
}

void count_macs(std::int64_t macs) {
  if (active && macs > 0) active->tallies_[attribution()].macs += macs;
}

void count_elementwise(std::int64_t elements) {
  if (active && elements > 0) active->tallies_[attribution()].elementwise += elements * kElementwiseOpsPerElement;
}

}  // namespace attnprof::nk
