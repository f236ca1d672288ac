#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "attnprof/errors.hpp"
#include "attnprof/instrument/clock.hpp"
#include "attnprof/layer_tag.hpp"

namespace attnprof {

struct TimerNode {
  std::optional<LayerTag> tag;  // untagged nodes are measurement roots
  std::int64_t start_ns = 0;
  std::int64_t stop_ns = 0;
  int parent = -1;
  std::vector<int> children;
  bool open = true;

  std::int64_t elapsed_ns() const { return stop_ns - start_ns; }
};

// Records nested regions in LIFO order. As a RegionObserver it turns every
// ScopedTag on the observed thread into a node.
class TimerTree final : public RegionObserver {
 public:
  explicit TimerTree(Clock& clock) : clock_(&clock) {}

  void open(std::optional<LayerTag> tag);
  // Throws InstrumentationError when nothing is open or `tag` is not the innermost region.
  void close(std::optional<LayerTag> tag);

  void on_enter(const LayerTag& tag) override { open(tag); }
  void on_exit(const LayerTag& tag) override { close(tag); }

  bool balanced() const { return stack_.empty(); }
  const std::vector<TimerNode>& nodes() const { return nodes_; }
  void clear();

  // Elapsed time of all top-level regions.
  std::int64_t total_ns() const;
  // Exclusive time per tag: a node's elapsed time minus its children's. Time
  // in untagged regions that no tagged child covers is filed under Other[0],
  // so the values sum to total_ns() exactly.
  std::map<LayerTag, std::int64_t> self_times() const;

 private:
  Clock* clock_;
  std::vector<TimerNode> nodes_;
  std::vector<int> stack_;
};

// Installs an observer on the current thread for the lifetime of the scope.
class ScopedObserver {
 public:
  explicit ScopedObserver(RegionObserver* observer) : previous_(set_region_observer(observer)) {}
  ~ScopedObserver() { set_region_observer(previous_); }
  ScopedObserver(const ScopedObserver&) = delete;
  ScopedObserver& operator=(const ScopedObserver&) = delete;

 private:
  RegionObserver* previous_;
};

// Runs `fn` inside a region tagged `tag` and returns its elapsed time.
template <typename Fn>
std::int64_t profile_region(TimerTree& tree, const LayerTag& tag, Fn&& fn) {
  tree.open(tag);
  const std::size_t index = tree.nodes().size() - 1;
  try {
    std::forward<Fn>(fn)();
  } catch (...) {
    tree.close(tag);
    throw;
  }
  tree.close(tag);
  return tree.nodes()[index].elapsed_ns();
}

struct LatencyBreakdown {
  std::int64_t total_ns = 0;
  std::map<LayerTag, std::int64_t> per_tag_ns;  // includes the Other[0] residual
};

// Times `fn` under an untagged root with every ScopedTag inside recorded.
template <typename Fn>
LatencyBreakdown profile_layerwise(Clock& clock, Fn&& fn) {
  TimerTree tree(clock);
  {
    ScopedObserver observe(&tree);
    tree.open(std::nullopt);
    std::forward<Fn>(fn)();
    tree.close(std::nullopt);
  }
  return {tree.total_ns(), tree.self_times()};
}

struct TimerCalibration {
  double region_overhead_ns = 0.0;  // mean cost of one empty open/close pair
  int samples = 0;
};

// Measures the cost of empty regions; reported in metadata, never subtracted.
TimerCalibration calibrate_timer(Clock& clock, int samples = 20000);

}  // namespace attnprof
