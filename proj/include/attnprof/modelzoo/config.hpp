#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace attnprof {

enum class Modality { Text, Speech, Vision };

enum class Family {
  TextFull,             // BERT-like
  TextSlidingWindow,    // Longformer-like
  TextNystrom,          // Nystromformer-like
  SpeechFull,           // HuBERT-like
  SpeechSlidingWindow,  // L-HuBERT-like
  VisionFull,           // ViT-like
  VisionShiftedWindow,  // Swin-like
};

enum class AttentionKind { Full, SlidingWindow, Nystrom, ShiftedWindow };

enum class Mode { Inference, Training };

std::string_view modality_name(Modality m);
std::string_view family_name(Family f);
std::string_view mode_name(Mode m);
std::optional<Family> parse_family(std::string_view name);
std::optional<Modality> parse_modality(std::string_view name);
std::optional<Mode> parse_mode(std::string_view name);

Modality modality_of(Family f);
AttentionKind attention_of(Family f);
// True for the families whose self-attention is the efficient variant.
bool is_efficient_family(Family f);

struct ConvLayerSpec {
  std::int64_t channels = 0;
  std::int64_t kernel = 0;
  std::int64_t stride = 1;

  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

// Full architectural description of one encoder archetype.
struct ModelConfig {
  std::string name;    // CLI name, e.g. "text-full"
  std::string preset;  // "paper", "desk" or free-form
  Family family = Family::TextFull;

  std::int64_t d_model = 768;
  std::int64_t n_layers = 12;
  std::int64_t n_heads = 12;
  std::int64_t d_ff = 3072;
  float layer_norm_eps = 1e-5f;

  // text
  std::int64_t vocab_size = 0;
  std::int64_t type_vocab_size = 0;
  std::int64_t max_positions = 0;
  bool pooler = false;

  // sliding window: total context in tokens (window/2 per side)
  std::optional<std::int64_t> attention_window;
  std::int64_t global_tokens = 0;

  // Nystrom
  std::int64_t n_landmarks = 64;
  std::int64_t pinv_iterations = 6;

  // vision
  std::int64_t patch_size = 16;
  std::int64_t image_channels = 3;
  std::vector<std::int64_t> stage_depths;
  std::vector<std::int64_t> stage_heads;
  std::int64_t swin_window = 7;

  std::optional<std::int64_t> pad_multiple;

  // speech
  std::vector<ConvLayerSpec> featurizer;
  std::int64_t sample_rate_hz = 16000;
  std::int64_t pos_conv_kernel = 128;
  std::int64_t pos_conv_groups = 16;
  std::int64_t final_proj_dim = 256;
  double framerate_hz = 0.0;

  std::int64_t head_dim() const { return d_model / n_heads; }
  Modality modality() const { return modality_of(family); }
  AttentionKind attention() const { return attention_of(family); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Throws ConfigError describing the first violated invariant.
void validate(const ModelConfig& config);

// Smallest multiple of `multiple` that is >= size (size itself when multiple <= 1).
std::int64_t pad_input(std::int64_t size, std::int64_t multiple);

// Key = value text format; '#' starts a comment. Lists are comma separated,
// featurizer layers are channels:kernel:stride.
std::string to_config_text(const ModelConfig& config);
ModelConfig parse_config_text(std::string_view text);
ModelConfig load_config_file(const std::string& path);
void save_config_file(const ModelConfig& config, const std::string& path);

}  // namespace attnprof
