#pragma once

#include <cstdint>

namespace attnprof {

// Monotonic nanosecond time source. Injectable so the measurement protocol can
// be tested with exact arithmetic.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::int64_t now_ns() = 0;
};

class SteadyClock final : public Clock {
 public:
  std::int64_t now_ns() override;
  static SteadyClock& instance();
};

// Advances only when told to, plus an optional fixed step per reading.
class FakeClock final : public Clock {
 public:
  explicit FakeClock(std::int64_t start_ns = 0, std::int64_t step_ns = 0) : now_(start_ns), step_(step_ns) {}

  std::int64_t now_ns() override {
    const std::int64_t t = now_;
    now_ += step_;
    return t;
  }
  void advance(std::int64_t ns) { now_ += ns; }
  void advance_ms(double ms) { now_ += static_cast<std::int64_t>(ms * 1e6); }
  void set_step(std::int64_t ns) { step_ = ns; }
  std::int64_t peek() const { return now_; }

 private:
  std::int64_t now_;
  std::int64_t step_;
};

}  // namespace attnprof
