#pragma once

#include <cstddef>
#include <map>
#include <utility>

#include "attnprof/costmodel/breakdown.hpp"
#include "attnprof/layer_tag.hpp"
#include "attnprof/modelzoo/model.hpp"
#include "attnprof/numkernel/memory.hpp"

namespace attnprof {

struct MemoryReport {
  std::size_t baseline_bytes = 0;    // live at scope entry (parameters etc.)
  std::size_t peak_bytes = 0;        // absolute peak during the computation
  std::size_t peak_delta_bytes = 0;  // peak minus baseline
  std::map<LayerTag, std::size_t> per_tag_peak;
  std::map<LayerTag, std::size_t> per_tag_at_peak;  // composition of peak_bytes
};

// Peak accounted bytes while `fn` runs. Only allocations move the counters.
template <typename Fn>
MemoryReport measure_peak_memory(Fn&& fn) {
  nk::MemoryScope scope;
  std::forward<Fn>(fn)();
  return {scope.entry_bytes(), scope.peak_bytes(), scope.peak_delta_bytes(), scope.per_tag_peak(),
          scope.per_tag_at_peak()};
}

// Parameter counts read off the live tensors of `model`.
CostBreakdown param_report(const EncoderModel& model);

}  // namespace attnprof
