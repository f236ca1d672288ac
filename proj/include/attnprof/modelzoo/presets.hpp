#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "attnprof/modelzoo/config.hpp"

namespace attnprof {

// paper-dims: Base-scale dimensions for exact parameter accounting.
// desk-dims: d=256, 4 layers, 4 heads, for fast host sweeps.
enum class Preset { Paper, Desk };

std::string_view preset_name(Preset p);
std::optional<Preset> parse_preset(std::string_view name);

struct ArchetypeInfo {
  std::string name;         // CLI name
  std::string description;  // e.g. "BERT-like"
  Family family;
};

// The seven archetypes, in roster order.
const std::vector<ArchetypeInfo>& archetypes();

// Throws LookupError (with suggestions) for unknown names.
ModelConfig preset_config(std::string_view name, Preset preset);
ModelConfig preset_config(Family family, Preset preset);

// Closest known names by edit distance, for error messages.
std::vector<std::string> suggest_names(std::string_view name, const std::vector<std::string>& known);

}  // namespace attnprof
