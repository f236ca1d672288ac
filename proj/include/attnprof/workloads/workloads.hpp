#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "attnprof/modelzoo/config.hpp"
#include "attnprof/modelzoo/model.hpp"

namespace attnprof {

// Grid points are token counts (text), seconds (speech) or square pixel sides
// (vision). `tokens` holds the nominal token count of each point.
struct SweepGrid {
  Modality modality = Modality::Text;
  std::vector<double> points;
  std::vector<std::int64_t> tokens;
};

inline constexpr std::int64_t kTokensPerRepeat = 6;
inline constexpr std::int64_t kSpecialTokens = 2;
inline constexpr std::int64_t kSpeechTokensPerSecond = 50;
inline constexpr std::int64_t kSampleRateHz = 16000;
inline constexpr std::int64_t kNominalPatch = 16;

// 62..3362 tokens in steps of 60 (n_repeats 10..560 step 10), inclusive.
SweepGrid text_grid();
// 1..50 s in steps of 0.5, inclusive.
SweepGrid speech_grid();
// 32..1024 px in steps of 32, inclusive.
SweepGrid vision_grid();
SweepGrid default_grid(Modality m);

// Grid with caller-chosen points; nominal tokens follow the modality rule.
SweepGrid custom_grid(Modality m, std::vector<double> points);

std::vector<std::int64_t> text_repeats();
std::int64_t text_tokens_for_repeats(std::int64_t n_repeats);

// Start token, n_repeats copies of a 6-token sentence, end token. Repeat
// counts off the default grid are allowed and reported through `warnings`
// (stderr when null).
TokenInput make_text_input(std::int64_t n_repeats, std::int64_t vocab_size = 30000,
                           std::vector<std::string>* warnings = nullptr);
// Same pattern truncated/extended to exactly `tokens` ids (>= 0).
TokenInput make_text_tokens(std::int64_t tokens, std::int64_t vocab_size = 30000);

// Seeded uniform noise in [-1, 1) of round(sample_rate * seconds) samples.
WaveformInput make_waveform(double seconds, std::uint64_t seed, std::int64_t sample_rate_hz = kSampleRateHz);
std::int64_t nominal_speech_tokens(double seconds);

// Seeded uniform [0, 1) dim x dim x channels image.
ImageInput make_image(std::int64_t dim, std::uint64_t seed, std::int64_t channels = 3);

// Model input for one grid point.
ModelInput make_input(const ModelConfig& config, double point, std::uint64_t seed);
// Grid point in the units sequence_shape() takes (tokens, samples, pixels).
std::int64_t model_units(const ModelConfig& config, double point);
// Encoder sequence length of one grid point under `config`.
std::int64_t tokens_for(const ModelConfig& config, double point);

// "a:b:c" -> a, a+c, ... up to and including b (within rounding).
// Throws ConfigError for malformed specs, c <= 0 or b < a.
std::vector<double> parse_grid_spec(std::string_view spec);

struct TypicalLength {
  std::string dataset;
  Modality modality;
  std::int64_t tokens;
};

// Average token lengths of common benchmarks, text then speech.
const std::vector<TypicalLength>& typical_lengths();
// Throws LookupError (with suggestions) for unknown datasets.
std::int64_t typical_length(std::string_view dataset);

}  // namespace attnprof
