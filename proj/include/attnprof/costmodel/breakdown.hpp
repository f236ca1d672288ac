#pragma once

#include <cstdint>
#include <map>

#include "attnprof/layer_tag.hpp"
#include "attnprof/modelzoo/config.hpp"

namespace attnprof {

// Cost attributed to one (tag kind, layer index).
struct TagCost {
  std::int64_t macs = 0;
  std::int64_t elementwise = 0;  // 5 ops per element of softmax/normalisation/activation
  std::int64_t bytes = 0;        // peak live activation bytes allocated under the tag
  std::int64_t params = 0;

  std::int64_t flops() const { return 2 * macs + elementwise; }

  TagCost& operator+=(const TagCost& o) {
    macs += o.macs;
    elementwise += o.elementwise;
    bytes += o.bytes;
    params += o.params;
    return *this;
  }
  friend bool operator==(const TagCost&, const TagCost&) = default;
};

struct CostBreakdown {
  Mode mode = Mode::Inference;
  std::map<LayerTag, TagCost> per_tag;
  std::int64_t peak_bytes = 0;  // whole-model peak (parameters + live activations)

  TagCost& at(const LayerTag& tag) { return per_tag[tag]; }
  // Zero cost for tags that never appear.
  TagCost get(const LayerTag& tag) const {
    const auto it = per_tag.find(tag);
    return it == per_tag.end() ? TagCost{} : it->second;
  }

  TagCost total() const {
    TagCost t;
    for (const auto& [tag, c] : per_tag) t += c;
    return t;
  }
  TagCost of_kind(TagKind kind) const {
    TagCost t;
    for (const auto& [tag, c] : per_tag)
      if (tag.kind == kind) t += c;
    return t;
  }
  std::map<TagKind, TagCost> by_kind() const {
    std::map<TagKind, TagCost> out;
    for (TagKind k : kAllTagKinds) out[k] = {};
    for (const auto& [tag, c] : per_tag) out[tag.kind] += c;
    return out;
  }
  std::map<LayerTag, std::int64_t> params() const {
    std::map<LayerTag, std::int64_t> out;
    for (const auto& [tag, c] : per_tag)
      if (c.params != 0) out[tag] = c.params;
    return out;
  }
};

}  // namespace attnprof
