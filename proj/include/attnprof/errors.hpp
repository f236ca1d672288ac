#pragma once

#include <stdexcept>
#include <string>

namespace attnprof {

// Shape or rank disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid model / kernel configuration (odd window, m > n, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Iterative numerics that failed to converge.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input too short to produce any output (conv receptive field etc).
class TooShortError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Region open/close misuse in the timer tree.
class InstrumentationError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Allocation would exceed the accountant's configured budget (the host analogue of an OOM).
class OutOfBudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Max-batch estimation could not produce a usable batch size.
class EstimatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

}  // namespace attnprof
