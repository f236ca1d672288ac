#pragma once

#include <atomic>
#include <cstddef>
#include <map>
#include <mutex>
#include <optional>

#include "attnprof/layer_tag.hpp"

namespace attnprof::nk {

// Byte-level bookkeeping for every tensor buffer. This is the host-side
// stand-in for an allocator's max-memory-allocated counter: only live
// allocations move it, reads never do.
//
// Invariants: peak >= current at all times; peak never decreases except
// through reset_peak(), which sets it to the current value.
class MemoryAccountant {
 public:
  MemoryAccountant() = default;
  MemoryAccountant(const MemoryAccountant&) = delete;
  MemoryAccountant& operator=(const MemoryAccountant&) = delete;

  // Throws OutOfBudgetError (without recording anything) when a budget is
  // set and the allocation would push current_bytes above it.
  void on_allocate(std::size_t bytes, std::optional<LayerTag> tag);
  void on_release(std::size_t bytes, std::optional<LayerTag> tag) noexcept;

  std::size_t current_bytes() const noexcept { return current_.load(std::memory_order_relaxed); }
  std::size_t peak_bytes() const noexcept { return peak_.load(std::memory_order_relaxed); }

  std::map<LayerTag, std::size_t> per_tag_peak() const;
  std::map<LayerTag, std::size_t> per_tag_current() const;
  // Live bytes per tag at the moment the current peak was reached.
  std::map<LayerTag, std::size_t> per_tag_at_peak() const;

  void reset_peak();

  void set_budget(std::optional<std::size_t> budget_bytes) noexcept;
  std::optional<std::size_t> budget() const noexcept;

  std::size_t allocation_count() const noexcept { return allocations_.load(std::memory_order_relaxed); }
  std::size_t release_count() const noexcept { return releases_.load(std::memory_order_relaxed); }

 private:
  struct TagBytes {
    std::size_t current = 0;
    std::size_t peak = 0;
  };

  std::atomic<std::size_t> current_{0};
  std::atomic<std::size_t> peak_{0};
  std::atomic<std::size_t> allocations_{0};
  std::atomic<std::size_t> releases_{0};
  std::atomic<std::size_t> budget_{0};  // 0 == unlimited
  mutable std::mutex tag_mutex_;
  std::map<LayerTag, TagBytes> tags_;
  std::map<LayerTag, std::size_t> at_peak_;

  void snapshot_peak_locked();
};

// Process-wide accountant used by every Buffer.
MemoryAccountant& accountant();

// Resets the accountant's peak on entry; reports peak over the scope.
class MemoryScope {
 public:
  MemoryScope();
  std::size_t entry_bytes() const noexcept { return entry_bytes_; }
  std::size_t peak_bytes() const noexcept;
  // Peak minus bytes already live at scope entry.
  std::size_t peak_delta_bytes() const noexcept;
  std::map<LayerTag, std::size_t> per_tag_peak() const;
  std::map<LayerTag, std::size_t> per_tag_at_peak() const;

 private:
  std::size_t entry_bytes_;
};

// Temporarily installs a budget on the global accountant.
class ScopedBudget {
 public:
  explicit ScopedBudget(std::optional<std::size_t> budget_bytes);
  ~ScopedBudget();
  ScopedBudget(const ScopedBudget&) = delete;
  ScopedBudget& operator=(const ScopedBudget&) = delete;

 private:
  std::optional<std::size_t> previous_;
};

// Owned float storage whose lifetime is reported to the accountant exactly once.
class Buffer {
 public:
  Buffer() = default;
  // Contents are zero when `zero_fill`, otherwise unspecified.
  Buffer(std::size_t count, bool zero_fill);
  ~Buffer();

  Buffer(Buffer&& other) noexcept;
  Buffer& operator=(Buffer&& other) noexcept;
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;

  float* data() noexcept { return data_; }
  const float* data() const noexcept { return data_; }
  std::size_t size() const noexcept { return size_; }
  std::optional<LayerTag> tag() const noexcept { return tag_; }

 private:
  void release() noexcept;

  float* data_ = nullptr;
  std::size_t size_ = 0;
  std::optional<LayerTag> tag_;
};

}  // namespace attnprof::nk
