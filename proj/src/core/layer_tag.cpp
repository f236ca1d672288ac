#include "attnprof/layer_tag.hpp"

#include <charconv>
#include <vector>

namespace attnprof {
namespace {

thread_local std::vector<LayerTag> tag_stack;
thread_local RegionObserver* observer = nullptr;

}  // namespace

std::string_view tag_kind_name(TagKind kind) {
  switch (kind) {
    case TagKind::InputEmbedding: return "InputEmbedding";
    case TagKind::PositionalEmbedding: return "PositionalEmbedding";
    case TagKind::SelfAttention: return "SelfAttention";
    case TagKind::Intermediate: return "Intermediate";
    case TagKind::Output: return "Output";
    case TagKind::Other: return "Other";
  }
  return "Other";
}

std::optional<TagKind> parse_tag_kind(std::string_view name) {
  for (TagKind k : kAllTagKinds) {
    if (tag_kind_name(k) == name) return k;
  }
  return std::nullopt;
}

std::string to_string(const LayerTag& tag) {
  std::string out(tag_kind_name(tag.kind));
  out += '[';
  out += std::to_string(tag.layer_index);
  out += ']';
  return out;
}

std::optional<LayerTag> parse_layer_tag(std::string_view text) {
  auto open = text.find('[');
  if (open == std::string_view::npos || text.empty() || text.back() != ']') return std::nullopt;
  auto kind = parse_tag_kind(text.substr(0, open));
  if (!kind) return std::nullopt;
  auto digits = text.substr(open + 1, text.size() - open - 2);
  int index = 0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), index);
  if (ec != std::errc() || ptr != digits.data() + digits.size() || index < 0) return std::nullopt;
  return LayerTag{*kind, index};
}

RegionObserver* set_region_observer(RegionObserver* next) {
  auto* prev = observer;
  observer = next;
  return prev;
}

RegionObserver* region_observer() { return observer; }

std::optional<LayerTag> current_tag() {
  if (tag_stack.empty()) return std::nullopt;
  return tag_stack.back();
}

ScopedTag::ScopedTag(LayerTag tag) : tag_(tag) {
  tag_stack.push_back(tag);
  if (observer) observer->on_enter(tag_);
}

ScopedTag::~ScopedTag() {
  if (observer) observer->on_exit(tag_);
  tag_stack.pop_back();
}

}  // namespace attnprof
