#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "attnprof/layer_tag.hpp"
#include "attnprof/modelzoo/config.hpp"
#include "attnprof/numkernel/tensor.hpp"

namespace attnprof {

struct Parameter {
  std::string name;
  LayerTag tag;
  nk::Tensor value;
  nk::Tensor grad;  // allocated only during a training step
};

// Parameter counts per (tag kind, layer index).
struct ParamBreakdown {
  std::map<LayerTag, std::int64_t> per_tag;

  std::int64_t total() const;
  std::int64_t of_kind(TagKind kind) const;
  std::map<TagKind, std::int64_t> by_kind() const;
  void add(const LayerTag& tag, std::int64_t count) { per_tag[tag] += count; }
  friend bool operator==(const ParamBreakdown&, const ParamBreakdown&) = default;
};

// Closed-form parameter counts from the configuration alone. The 2-way
// classification head (Other[0]) is included only when `with_head`.
ParamBreakdown count_params(const ModelConfig& config, bool with_head = false);

}  // namespace attnprof
