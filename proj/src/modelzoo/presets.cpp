#include "attnprof/modelzoo/presets.hpp"

#include <algorithm>

#include "attnprof/errors.hpp"

namespace attnprof {

std::string_view preset_name(Preset p) { return p == Preset::Paper ? "paper" : "desk"; }

std::optional<Preset> parse_preset(std::string_view name) {
  if (name == "paper" || name == "paper-dims") return Preset::Paper;
  if (name == "desk" || name == "desk-dims") return Preset::Desk;
  return std::nullopt;
}

const std::vector<ArchetypeInfo>& archetypes() {
  static const std::vector<ArchetypeInfo> roster = {
      {"text-full", "BERT-like", Family::TextFull},
      {"text-sliding", "Longformer-like", Family::TextSlidingWindow},
      {"text-nystrom", "Nystromformer-like", Family::TextNystrom},
      {"speech-full", "HuBERT-like", Family::SpeechFull},
      {"speech-sliding", "L-HuBERT-like", Family::SpeechSlidingWindow},
      {"vision-full", "ViT-like", Family::VisionFull},
      {"vision-swin", "Swin-like", Family::VisionShiftedWindow},
  };
  return roster;
}

namespace {

std::vector<ConvLayerSpec> speech_featurizer(std::int64_t channels) {
  std::vector<ConvLayerSpec> layers{{channels, 10, 5}};
  for (int i = 0; i < 4; ++i) layers.push_back({channels, 3, 2});
  for (int i = 0; i < 2; ++i) layers.push_back({channels, 2, 2});
  return layers;
}

void apply_desk_dims(ModelConfig& c) {
  c.d_model = 256;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_ff = 1024;
}

}  // namespace

ModelConfig preset_config(Family family, Preset preset) {
  const bool paper = preset == Preset::Paper;
  ModelConfig c;
  c.family = family;
  c.preset = std::string(preset_name(preset));
  for (const auto& a : archetypes()) {
    if (a.family == family) c.name = a.name;
  }

  switch (family) {
    case Family::TextFull:
      c.vocab_size = 30522;
      c.type_vocab_size = 2;
      c.max_positions = 512;
      c.pooler = true;
      c.layer_norm_eps = 1e-12f;
      break;
    case Family::TextSlidingWindow:
      c.vocab_size = 50265;
      c.type_vocab_size = 1;
      c.max_positions = 4098;
      c.pooler = true;
      c.attention_window = 512;
      c.global_tokens = 1;
      c.pad_multiple = 512;
      break;
    case Family::TextNystrom:
      c.vocab_size = 30000;
      c.type_vocab_size = 1;
      c.max_positions = 4096;
      c.pooler = false;
      c.n_landmarks = 64;
      c.pinv_iterations = 6;
      break;
    case Family::SpeechFull:
    case Family::SpeechSlidingWindow:
      c.featurizer = speech_featurizer(paper ? 512 : 128);
      c.framerate_hz = 50.0;
      c.final_proj_dim = 256;
      if (family == Family::SpeechSlidingWindow) c.attention_window = 100;
      break;
    case Family::VisionFull:
      c.patch_size = 16;
      c.max_positions = (224 / 16) * (224 / 16) + 1;
      c.pooler = true;
      c.layer_norm_eps = 1e-12f;
      break;
    case Family::VisionShiftedWindow:
      c.patch_size = 4;
      c.swin_window = 7;
      c.pad_multiple = 224;
      break;
  }

  if (family == Family::VisionShiftedWindow) {
    if (paper) {
      c.d_model = 128;
      c.stage_depths = {2, 2, 18, 2};
      c.stage_heads = {4, 8, 16, 32};
    } else {
      c.d_model = 32;
      c.stage_depths = {2, 2, 6, 2};
      c.stage_heads = {1, 2, 4, 8};
    }
    c.n_heads = c.stage_heads.front();
    c.n_layers = 0;
    for (auto d : c.stage_depths) c.n_layers += d;
    c.d_ff = 4 * c.d_model;
  } else if (!paper) {
    apply_desk_dims(c);
  }
  validate(c);
  return c;
}

ModelConfig preset_config(std::string_view name, Preset preset) {
  for (const auto& a : archetypes()) {
    if (a.name == name) return preset_config(a.family, preset);
  }
  std::vector<std::string> known;
  for (const auto& a : archetypes()) known.push_back(a.name);
  std::string msg = "unknown model '" + std::string(name) + "'";
  auto sugg = suggest_names(name, known);
  if (!sugg.empty()) {
    msg += "; did you mean";
    for (std::size_t i = 0; i < sugg.size(); ++i) msg += (i ? ", " : " ") + sugg[i];
    msg += "?";
  }
  throw LookupError(msg);
}

std::vector<std::string> suggest_names(std::string_view name, const std::vector<std::string>& known) {
  auto distance = [](std::string_view a, std::string_view b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
      cur[0] = i;
      for (std::size_t j = 1; j <= b.size(); ++j) {
        cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
      }
      std::swap(prev, cur);
    }
    return prev[b.size()];
  };
  std::vector<std::pair<std::size_t, std::string>> scored;
  for (const auto& k : known) {
    std::size_t d = distance(name, k);
    bool prefix = !name.empty() && k.find(name) != std::string::npos;
    if (prefix || d <= std::max<std::size_t>(3, k.size() / 3)) scored.emplace_back(prefix ? 0 : d, k);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < scored.size() && i < 3; ++i) out.push_back(scored[i].second);
  return out;
}

}  // namespace attnprof
