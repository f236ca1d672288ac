#include "attnprof/instrument/timer_tree.hpp"

#include <chrono>
#include <string>

namespace attnprof {

std::int64_t SteadyClock::now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

SteadyClock& SteadyClock::instance() {
  static SteadyClock clock;
  return clock;
}

namespace {

std::string describe(const std::optional<LayerTag>& tag) { return tag ? to_string(*tag) : std::string("<root>"); }

}  // namespace

void TimerTree::open(std::optional<LayerTag> tag) {
  TimerNode node;
  node.tag = tag;
  node.parent = stack_.empty() ? -1 : stack_.back();
  const int index = static_cast<int>(nodes_.size());
  if (node.parent >= 0) nodes_[static_cast<std::size_t>(node.parent)].children.push_back(index);
  nodes_.push_back(std::move(node));
  stack_.push_back(index);
  nodes_.back().start_ns = clock_->now_ns();
}

void TimerTree::close(std::optional<LayerTag> tag) {
  const std::int64_t now = clock_->now_ns();
  if (stack_.empty()) throw InstrumentationError("close of " + describe(tag) + " with no open region");
  TimerNode& node = nodes_[static_cast<std::size_t>(stack_.back())];
  if (node.tag != tag) {
    throw InstrumentationError("close of " + describe(tag) + " while " + describe(node.tag) + " is innermost");
  }
  node.stop_ns = now;
  node.open = false;
  stack_.pop_back();
}

void TimerTree::clear() {
  nodes_.clear();
  stack_.clear();
}

std::int64_t TimerTree::total_ns() const {
  if (!stack_.empty()) throw InstrumentationError("timer tree has open regions");
  std::int64_t total = 0;
  for (const auto& n : nodes_)
    if (n.parent < 0) total += n.elapsed_ns();
  return total;
}

std::map<LayerTag, std::int64_t> TimerTree::self_times() const {
  if (!stack_.empty()) throw InstrumentationError("timer tree has open regions");
  std::map<LayerTag, std::int64_t> out;
  for (const auto& n : nodes_) {
    std::int64_t self = n.elapsed_ns();
    for (int c : n.children) self -= nodes_[static_cast<std::size_t>(c)].elapsed_ns();
    const LayerTag tag = n.tag.value_or(LayerTag{TagKind::Other, 0});
    out[tag] += self;
  }
  return out;
}

TimerCalibration calibrate_timer(Clock& clock, int samples) {
  TimerTree tree(clock);
  const LayerTag tag{TagKind::Other, 0};
  const std::int64_t start = clock.now_ns();
  for (int i = 0; i < samples; ++i) {
    tree.open(tag);
    tree.close(tag);
  }
  const std::int64_t stop = clock.now_ns();
  TimerCalibration c;
  c.samples = samples;
  c.region_overhead_ns = samples > 0 ? static_cast<double>(stop - start) / samples : 0.0;
  return c;
}

}  // namespace attnprof
