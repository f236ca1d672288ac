#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace attnprof {

// The six-way taxonomy used for cost attribution. The kinds are exhaustive:
// anything that is not one of the first five is Other.
enum class TagKind : std::uint8_t {
  InputEmbedding,
  PositionalEmbedding,
  SelfAttention,
  Intermediate,
  Output,
  Other,
};

inline constexpr std::array<TagKind, 6> kAllTagKinds = {
    TagKind::InputEmbedding, TagKind::PositionalEmbedding, TagKind::SelfAttention,
    TagKind::Intermediate,   TagKind::Output,              TagKind::Other,
};

struct LayerTag {
  TagKind kind = TagKind::Other;
  int layer_index = 0;

  auto operator<=>(const LayerTag&) const = default;
};

std::string_view tag_kind_name(TagKind kind);
std::optional<TagKind> parse_tag_kind(std::string_view name);

// "SelfAttention[3]"
std::string to_string(const LayerTag& tag);
std::optional<LayerTag> parse_layer_tag(std::string_view text);

// Receives enter/exit notifications for every ScopedTag on the installing thread.
class RegionObserver {
 public:
  virtual ~RegionObserver() = default;
  virtual void on_enter(const LayerTag& tag) = 0;
  virtual void on_exit(const LayerTag& tag) = 0;
};

// Installs `observer` for the current thread and returns the previous one.
RegionObserver* set_region_observer(RegionObserver* observer);
RegionObserver* region_observer();

// Innermost active tag on this thread, if any.
std::optional<LayerTag> current_tag();

// Marks a lexical region as belonging to `tag`. Allocations and op counts made
// inside are attributed to the innermost tag; an installed observer is notified.
class ScopedTag {
 public:
  explicit ScopedTag(LayerTag tag);
  ~ScopedTag();
  ScopedTag(const ScopedTag&) = delete;
  ScopedTag& operator=(const ScopedTag&) = delete;

 private:
  LayerTag tag_;
};

}  // namespace attnprof
