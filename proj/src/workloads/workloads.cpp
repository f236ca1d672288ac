#include "attnprof/workloads/workloads.hpp"

#include <charconv>
#include <cmath>
#include <iostream>
#include <random>

#include "attnprof/errors.hpp"
#include "attnprof/modelzoo/presets.hpp"

namespace attnprof {

namespace {

std::vector<double> inclusive_range(double a, double b, double step) {
  std::vector<double> out;
  const auto count = static_cast<std::int64_t>(std::floor((b - a) / step + 1e-9)) + 1;
  for (std::int64_t i = 0; i < count; ++i) out.push_back(a + static_cast<double>(i) * step);
  return out;
}

std::int64_t nominal_tokens(Modality m, double point) {
  switch (m) {
    case Modality::Text: return static_cast<std::int64_t>(std::llround(point));
    case Modality::Speech: return nominal_speech_tokens(point);
    case Modality::Vision: {
      const auto side = static_cast<std::int64_t>(std::llround(point)) / kNominalPatch;
      return side * side;
    }
  }
  return 0;
}

// "This is a sentence." as 6 ids; start and end markers around the repeats.
constexpr std::int32_t kSentence[kTokensPerRepeat] = {713, 16, 10, 3645, 4, 1437};
constexpr std::int32_t kStart = 0, kEnd = 2;

}  // namespace

SweepGrid custom_grid(Modality m, std::vector<double> points) {
  SweepGrid g;
  g.modality = m;
  g.points = std::move(points);
  for (double p : g.points) g.tokens.push_back(nominal_tokens(m, p));
  return g;
}

SweepGrid text_grid() {
  std::vector<double> points;
  for (std::int64_t r : text_repeats()) points.push_back(static_cast<double>(text_tokens_for_repeats(r)));
  return custom_grid(Modality::Text, std::move(points));
}

SweepGrid speech_grid() { return custom_grid(Modality::Speech, inclusive_range(1.0, 50.0, 0.5)); }

SweepGrid vision_grid() { return custom_grid(Modality::Vision, inclusive_range(32.0, 1024.0, 32.0)); }

SweepGrid default_grid(Modality m) {
  switch (m) {
    case Modality::Text: return text_grid();
    case Modality::Speech: return speech_grid();
    case Modality::Vision: return vision_grid();
  }
  return text_grid();
}

std::vector<std::int64_t> text_repeats() {
  std::vector<std::int64_t> out;
  for (std::int64_t r = 10; r <= 560; r += 10) out.push_back(r);
  return out;
}

std::int64_t text_tokens_for_repeats(std::int64_t n_repeats) { return kTokensPerRepeat * n_repeats + kSpecialTokens; }

TokenInput make_text_input(std::int64_t n_repeats, std::int64_t vocab_size, std::vector<std::string>* warnings) {
  if (n_repeats < 0) throw ConfigError("n_repeats must be >= 0");
  if (n_repeats < 10 || n_repeats > 560 || n_repeats % 10 != 0) {
    const std::string msg = "n_repeats " + std::to_string(n_repeats) + " is outside the default text grid (10..560 step 10)";
    if (warnings) warnings->push_back(msg);
    else std::cerr << "warning: " << msg << "\n";
  }
  return make_text_tokens(text_tokens_for_repeats(n_repeats), vocab_size);
}

TokenInput make_text_tokens(std::int64_t tokens, std::int64_t vocab_size) {
  if (tokens < 0) throw ConfigError("token count must be >= 0");
  if (vocab_size < 1) throw ConfigError("vocab size must be >= 1");
  TokenInput in;
  in.ids.reserve(static_cast<std::size_t>(tokens));
  for (std::int64_t i = 0; i < tokens; ++i) {
    std::int32_t id = kSentence[(i - 1 + kTokensPerRepeat) % kTokensPerRepeat];
    if (i == 0) id = kStart;
    else if (i == tokens - 1 && tokens >= kSpecialTokens) id = kEnd;
    in.ids.push_back(static_cast<std::int32_t>(id % vocab_size));
  }
  return in;
}

WaveformInput make_waveform(double seconds, std::uint64_t seed, std::int64_t sample_rate_hz) {
  if (!(seconds >= 0.0)) throw ConfigError("duration must be >= 0");
  const auto samples = static_cast<std::int64_t>(std::llround(static_cast<double>(sample_rate_hz) * seconds));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.f, 1.f);
  WaveformInput w{nk::Tensor::uninitialized({samples})};
  for (float& v : w.samples.values()) v = dist(rng);
  return w;
}

std::int64_t nominal_speech_tokens(double seconds) {
  return static_cast<std::int64_t>(std::llround(static_cast<double>(kSpeechTokensPerSecond) * seconds));
}

ImageInput make_image(std::int64_t dim, std::uint64_t seed, std::int64_t channels) {
  if (dim < 1 || channels < 1) throw ConfigError("image dimension and channels must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(0.f, 1.f);
  ImageInput img{nk::Tensor::uninitialized({dim, dim, channels})};
  for (float& v : img.pixels.values()) v = dist(rng);
  return img;
}

std::int64_t model_units(const ModelConfig& config, double point) {
  if (config.modality() == Modality::Speech) {
    return static_cast<std::int64_t>(std::llround(static_cast<double>(config.sample_rate_hz) * point));
  }
  return static_cast<std::int64_t>(std::llround(point));
}

ModelInput make_input(const ModelConfig& config, double point, std::uint64_t seed) {
  switch (config.modality()) {
    case Modality::Text: return make_text_tokens(model_units(config, point), config.vocab_size);
    case Modality::Speech: return make_waveform(point, seed, config.sample_rate_hz);
    case Modality::Vision: return make_image(model_units(config, point), seed, config.image_channels);
  }
  return TokenInput{};
}

std::int64_t tokens_for(const ModelConfig& config, double point) {
  return sequence_shape(config, model_units(config, point)).tokens;
}

namespace {

double parse_number(std::string_view s, std::string_view spec) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
    throw ConfigError("grid '" + std::string(spec) + "': '" + std::string(s) + "' is not a number");
  }
  return v;
}

}  // namespace

std::vector<double> parse_grid_spec(std::string_view spec) {
  const auto c1 = spec.find(':');
  const auto c2 = c1 == std::string_view::npos ? c1 : spec.find(':', c1 + 1);
  if (c1 == std::string_view::npos) {
    return {parse_number(spec, spec)};
  }
  if (c2 == std::string_view::npos || spec.find(':', c2 + 1) != std::string_view::npos) {
    throw ConfigError("grid '" + std::string(spec) + "': expected start:stop:step");
  }
  const double a = parse_number(spec.substr(0, c1), spec);
  const double b = parse_number(spec.substr(c1 + 1, c2 - c1 - 1), spec);
  const double c = parse_number(spec.substr(c2 + 1), spec);
  if (!(c > 0.0)) throw ConfigError("grid '" + std::string(spec) + "': step must be > 0");
  if (b < a) throw ConfigError("grid '" + std::string(spec) + "': stop must be >= start");
  return inclusive_range(a, b, c);
}

const std::vector<TypicalLength>& typical_lengths() {
  static const std::vector<TypicalLength> table = {
      {"SST", Modality::Text, 23},          {"MNLI", Modality::Text, 36},
      {"SQuAD", Modality::Text, 177},       {"OntoNotes", Modality::Text, 506},
      {"CNN", Modality::Text, 863},         {"HotpotQA", Modality::Text, 1316},
      {"TriviaQA", Modality::Text, 6589},   {"TEDLIUM", Modality::Speech, 301},
      {"LJSpeech", Modality::Speech, 328},  {"VoxCeleb", Modality::Speech, 390},
      {"Librispeech", Modality::Speech, 615}, {"Spoken-SQuAD", Modality::Speech, 3080},
      {"Spotify", Modality::Speech, 101400},
  };
  return table;
}

std::int64_t typical_length(std::string_view dataset) {
  std::vector<std::string> names;
  for (const auto& t : typical_lengths()) {
    if (t.dataset == dataset) return t.tokens;
    names.push_back(t.dataset);
  }
  std::string msg = "unknown dataset '" + std::string(dataset) + "'";
  const auto close = suggest_names(dataset, names);
  if (!close.empty()) msg += "; did you mean " + close.front() + "?";
  throw LookupError(msg);
}

}  // namespace attnprof
