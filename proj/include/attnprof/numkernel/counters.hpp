#pragma once

#include <cstdint>
#include <map>

#include "attnprof/layer_tag.hpp"

namespace attnprof::nk {

// Logical operation tallies, attributed to the innermost ScopedTag.
// macs: multiply-accumulates of contractions (matmul, conv, attention).
// elementwise: 5 per element for softmax, normalisations and activations.
struct OpTally {
  std::int64_t macs = 0;
  std::int64_t elementwise = 0;

  OpTally& operator+=(const OpTally& o) {
    macs += o.macs;
    elementwise += o.elementwise;
    return *this;
  }
  friend bool operator==(const OpTally&, const OpTally&) = default;
};

inline constexpr std::int64_t kElementwiseOpsPerElement = 5;

// Counting is off unless a CountingScope is live on the calling thread.
class CountingScope {
 public:
  CountingScope();
  ~CountingScope();
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

  // Untagged work is filed under Other[0].
  const std::map<LayerTag, OpTally>& per_tag() const { return tallies_; }
  OpTally total() const;

 private:
  friend void count_macs(std::int64_t);
  friend void count_elementwise(std::int64_t);
  std::map<LayerTag, OpTally> tallies_;
  CountingScope* previous_;
};

void count_macs(std::int64_t macs);
// `elements` touched by a 5-op elementwise kernel.
void count_elementwise(std::int64_t elements);

}  // namespace attnprof::nk
