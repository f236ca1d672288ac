#include "attnprof/numkernel/memory.hpp"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>
#include <utility>

#include "attnprof/errors.hpp"

namespace attnprof::nk {

void MemoryAccountant::on_allocate(std::size_t bytes, std::optional<LayerTag> tag) {
  std::size_t limit = budget_.load(std::memory_order_relaxed);
  std::size_t now = current_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  if (limit != 0 && now > limit) {
    current_.fetch_sub(bytes, std::memory_order_relaxed);
    throw OutOfBudgetError("allocation of " + std::to_string(bytes) + " bytes exceeds budget of " +
                           std::to_string(limit) + " bytes");
  }
  allocations_.fetch_add(1, std::memory_order_relaxed);
  std::lock_guard lock(tag_mutex_);
  if (tag) {
    auto& entry = tags_[*tag];
    entry.current += bytes;
    if (entry.current > entry.peak) entry.peak = entry.current;
  }
  std::size_t seen = peak_.load(std::memory_order_relaxed);
  bool raised = false;
  while (now > seen && !(raised = peak_.compare_exchange_weak(seen, now, std::memory_order_relaxed))) {
  }
  if (raised) snapshot_peak_locked();
}

void MemoryAccountant::snapshot_peak_locked() {
  at_peak_.clear();
  for (const auto& [t, entry] : tags_) {
    if (entry.current > 0) at_peak_.emplace(t, entry.current);
  }
}

std::map<LayerTag, std::size_t> MemoryAccountant::per_tag_at_peak() const {
  std::lock_guard lock(tag_mutex_);
  return at_peak_;
}

void MemoryAccountant::on_release(std::size_t bytes, std::optional<LayerTag> tag) noexcept {
  current_.fetch_sub(bytes, std::memory_order_relaxed);
  releases_.fetch_add(1, std::memory_order_relaxed);
  if (tag) {
    std::lock_guard lock(tag_mutex_);
    auto& entry = tags_[*tag];
    entry.current -= bytes;
  }
}

std::map<LayerTag, std::size_t> MemoryAccountant::per_tag_peak() const {
  std::lock_guard lock(tag_mutex_);
  std::map<LayerTag, std::size_t> out;
  for (const auto& [tag, entry] : tags_) {
    if (entry.peak > 0) out.emplace(tag, entry.peak);
  }
  return out;
}

std::map<LayerTag, std::size_t> MemoryAccountant::per_tag_current() const {
  std::lock_guard lock(tag_mutex_);
  std::map<LayerTag, std::size_t> out;
  for (const auto& [tag, entry] : tags_) {
    if (entry.current > 0) out.emplace(tag, entry.current);
  }
  return out;
}

void MemoryAccountant::reset_peak() {
  peak_.store(current_.load(std::memory_order_relaxed), std::memory_order_relaxed);
  std::lock_guard lock(tag_mutex_);
  for (auto& [tag, entry] : tags_) entry.peak = entry.current;
  snapshot_peak_locked();
}

void MemoryAccountant::set_budget(std::optional<std::size_t> budget_bytes) noexcept {
  budget_.store(budget_bytes.value_or(0), std::memory_order_relaxed);
}

std::optional<std::size_t> MemoryAccountant::budget() const noexcept {
  std::size_t b = budget_.load(std::memory_order_relaxed);
  if (b == 0) return std::nullopt;
  return b;
}

MemoryAccountant& accountant() {
  static MemoryAccountant instance;
  return instance;
}

MemoryScope::MemoryScope() : entry_bytes_(accountant().current_bytes()) { accountant().reset_peak(); }

std::size_t MemoryScope::peak_bytes() const noexcept { return accountant().peak_bytes(); }

std::size_t MemoryScope::peak_delta_bytes() const noexcept {
  std::size_t peak = accountant().peak_bytes();
  return peak > entry_bytes_ ? peak - entry_bytes_ : 0;
}

std::map<LayerTag, std::size_t> MemoryScope::per_tag_peak() const { return accountant().per_tag_peak(); }

std::map<LayerTag, std::size_t> MemoryScope::per_tag_at_peak() const { return accountant().per_tag_at_peak(); }

ScopedBudget::ScopedBudget(std::optional<std::size_t> budget_bytes) : previous_(accountant().budget()) {
  accountant().set_budget(budget_bytes);
}

ScopedBudget::~ScopedBudget() { accountant().set_budget(previous_); }

Buffer::Buffer(std::size_t count, bool zero_fill) : size_(count), tag_(current_tag()) {
  if (count == 0) return;
  accountant().on_allocate(count * sizeof(float), tag_);
  // 64-byte alignment keeps the vectorised kernels on aligned loads.
  std::size_t bytes = ((count * sizeof(float) + 63) / 64) * 64;
  data_ = static_cast<float*>(std::aligned_alloc(64, bytes));
  if (data_ == nullptr) {
    accountant().on_release(count * sizeof(float), tag_);
    throw std::bad_alloc();
  }
  if (zero_fill) std::memset(data_, 0, count * sizeof(float));
}

Buffer::~Buffer() { release(); }

Buffer::Buffer(Buffer&& other) noexcept
    : data_(std::exchange(other.data_, nullptr)), size_(std::exchange(other.size_, 0)), tag_(other.tag_) {}

Buffer& Buffer::operator=(Buffer&& other) noexcept {
  if (this != &other) {
    release();
    data_ = std::exchange(other.data_, nullptr);
    size_ = std::exchange(other.size_, 0);
    tag_ = other.tag_;
  }
  return *this;
}

void Buffer::release() noexcept {
  if (size_ > 0) {
    std::free(data_);
    accountant().on_release(size_ * sizeof(float), tag_);
  }
  data_ = nullptr;
  size_ = 0;
}

}  // namespace attnprof::nk
