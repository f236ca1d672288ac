#include "attnprof/modelzoo/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "attnprof/errors.hpp"

namespace attnprof {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::Text: return "text";
    case Modality::Speech: return "speech";
    case Modality::Vision: return "vision";
  }
  return "text";
}

std::string_view family_name(Family f) {
  switch (f) {
    case Family::TextFull: return "TextFull";
    case Family::TextSlidingWindow: return "TextSlidingWindow";
    case Family::TextNystrom: return "TextNystrom";
    case Family::SpeechFull: return "SpeechFull";
    case Family::SpeechSlidingWindow: return "SpeechSlidingWindow";
    case Family::VisionFull: return "VisionFull";
    case Family::VisionShiftedWindow: return "VisionShiftedWindow";
  }
  return "TextFull";
}

std::string_view mode_name(Mode m) { return m == Mode::Inference ? "inference" : "training"; }

std::optional<Family> parse_family(std::string_view name) {
  for (Family f : {Family::TextFull, Family::TextSlidingWindow, Family::TextNystrom, Family::SpeechFull,
                   Family::SpeechSlidingWindow, Family::VisionFull, Family::VisionShiftedWindow}) {
    if (family_name(f) == name) return f;
  }
  return std::nullopt;
}

std::optional<Modality> parse_modality(std::string_view name) {
  for (Modality m : {Modality::Text, Modality::Speech, Modality::Vision}) {
    if (modality_name(m) == name) return m;
  }
  return std::nullopt;
}

std::optional<Mode> parse_mode(std::string_view name) {
  if (name == "inference") return Mode::Inference;
  if (name == "training") return Mode::Training;
  return std::nullopt;
}

Modality modality_of(Family f) {
  switch (f) {
    case Family::TextFull:
    case Family::TextSlidingWindow:
    case Family::TextNystrom: return Modality::Text;
    case Family::SpeechFull:
    case Family::SpeechSlidingWindow: return Modality::Speech;
    case Family::VisionFull:
    case Family::VisionShiftedWindow: return Modality::Vision;
  }
  return Modality::Text;
}

AttentionKind attention_of(Family f) {
  switch (f) {
    case Family::TextSlidingWindow:
    case Family::SpeechSlidingWindow: return AttentionKind::SlidingWindow;
    case Family::TextNystrom: return AttentionKind::Nystrom;
    case Family::VisionShiftedWindow: return AttentionKind::ShiftedWindow;
    default: return AttentionKind::Full;
  }
}

bool is_efficient_family(Family f) { return attention_of(f) != AttentionKind::Full; }

std::int64_t pad_input(std::int64_t size, std::int64_t multiple) {
  if (multiple <= 1) return size;
  return ((size + multiple - 1) / multiple) * multiple;
}

void validate(const ModelConfig& c) {
  auto fail = [&](const std::string& what) { throw ConfigError(c.name + ": " + what); };
  if (c.d_model < 1 || c.n_heads < 1) fail("d_model and n_heads must be positive");
  if (c.d_model % c.n_heads != 0) fail("d_model must be divisible by n_heads");
  if (c.n_layers < 0 || c.d_ff < 0) fail("n_layers and d_ff must be non-negative");
  if (c.pad_multiple && *c.pad_multiple < 1) fail("pad_multiple must be >= 1");
  if (c.attention() == AttentionKind::SlidingWindow) {
    if (!c.attention_window) fail("sliding-window family requires attention_window");
    if (*c.attention_window < 2 || *c.attention_window % 2 != 0) fail("attention_window must be even and >= 2");
  } else if (c.attention_window) {
    fail("attention_window is only valid for sliding-window families");
  }
  if (c.global_tokens < 0) fail("global_tokens must be non-negative");
  if (c.global_tokens > 0 && c.family != Family::TextSlidingWindow) fail("global tokens are a text sliding-window feature");
  if (c.attention() == AttentionKind::Nystrom && (c.n_landmarks < 1 || c.pinv_iterations < 1)) {
    fail("n_landmarks and pinv_iterations must be positive");
  }
  switch (c.modality()) {
    case Modality::Text:
      if (c.vocab_size < 1 || c.max_positions < 1 || c.type_vocab_size < 1) fail("text models need vocab, type vocab and positions");
      break;
    case Modality::Speech:
      if (c.featurizer.empty()) fail("speech models need a featurizer");
      for (const auto& l : c.featurizer) {
        if (l.channels < 1 || l.kernel < 1 || l.stride < 1) fail("featurizer layers must be positive");
      }
      if (c.pos_conv_kernel < 1 || c.pos_conv_groups < 1 || c.d_model % c.pos_conv_groups != 0) {
        fail("positional conv must divide d_model into groups");
      }
      if (c.final_proj_dim < 1) fail("final_proj_dim must be positive");
      break;
    case Modality::Vision:
      if (c.patch_size < 1 || c.image_channels < 1) fail("patch size and channels must be positive");
      if (c.family == Family::VisionFull && c.max_positions < 1) fail("ViT needs a positional table");
      if (c.family == Family::VisionShiftedWindow) {
        if (c.stage_depths.empty() || c.stage_depths.size() != c.stage_heads.size()) fail("stage depths/heads mismatch");
        std::int64_t total = 0, dim = c.d_model;
        for (std::size_t s = 0; s < c.stage_depths.size(); ++s) {
          if (c.stage_depths[s] < 0 || c.stage_heads[s] < 1 || dim % c.stage_heads[s] != 0) {
            fail("stage " + std::to_string(s) + " heads must divide its width");
          }
          total += c.stage_depths[s];
          dim *= 2;
        }
        if (total != c.n_layers) fail("n_layers must equal the sum of stage depths");
        if (c.swin_window < 1) fail("swin_window must be positive");
        if (c.d_ff % c.d_model != 0) fail("Swin d_ff must be an integer multiple of d_model");
      }
      break;
  }
}

// ---------------------------------------------------------------- text format

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("config key '" + key + "': not an integer: " + v);
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: " + v);
  }
}

std::vector<std::string> split(const std::string& v, char sep) {
  std::vector<std::string> out;
  if (v.empty()) return out;
  std::string cur;
  std::istringstream in(v);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

std::string join_ints(const std::vector<std::int64_t>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

std::string format_double(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

}  // namespace

std::string to_config_text(const ModelConfig& c) {
  std::ostringstream o;
  o << "name = " << c.name << "\n";
  o << "preset = " << c.preset << "\n";
  o << "family = " << family_name(c.family) << "\n";
  o << "d_model = " << c.d_model << "\n";
  o << "n_layers = " << c.n_layers << "\n";
  o << "n_heads = " << c.n_heads << "\n";
  o << "d_ff = " << c.d_ff << "\n";
  o << "layer_norm_eps = " << format_double(c.layer_norm_eps) << "\n";
  switch (c.modality()) {
    case Modality::Text:
      o << "vocab_size = " << c.vocab_size << "\n";
      o << "type_vocab_size = " << c.type_vocab_size << "\n";
      o << "max_positions = " << c.max_positions << "\n";
      o << "pooler = " << (c.pooler ? "true" : "false") << "\n";
      break;
    case Modality::Speech: {
      std::string f;
      for (std::size_t i = 0; i < c.featurizer.size(); ++i) {
        f += (i ? "," : "") + std::to_string(c.featurizer[i].channels) + ":" + std::to_string(c.featurizer[i].kernel) +
             ":" + std::to_string(c.featurizer[i].stride);
      }
      o << "featurizer = " << f << "\n";
      o << "sample_rate_hz = " << c.sample_rate_hz << "\n";
      o << "pos_conv_kernel = " << c.pos_conv_kernel << "\n";
      o << "pos_conv_groups = " << c.pos_conv_groups << "\n";
      o << "final_proj_dim = " << c.final_proj_dim << "\n";
      o << "framerate_hz = " << format_double(c.framerate_hz) << "\n";
      break;
    }
    case Modality::Vision:
      o << "patch_size = " << c.patch_size << "\n";
      o << "image_channels = " << c.image_channels << "\n";
      if (c.family == Family::VisionShiftedWindow) {
        o << "stage_depths = " << join_ints(c.stage_depths) << "\n";
        o << "stage_heads = " << join_ints(c.stage_heads) << "\n";
        o << "swin_window = " << c.swin_window << "\n";
      } else {
        o << "max_positions = " << c.max_positions << "\n";
        o << "pooler = " << (c.pooler ? "true" : "false") << "\n";
      }
      break;
  }
  if (c.attention_window) o << "attention_window = " << *c.attention_window << "\n";
  if (c.global_tokens > 0) o << "global_tokens = " << c.global_tokens << "\n";
  if (c.attention() == AttentionKind::Nystrom) {
    o << "n_landmarks = " << c.n_landmarks << "\n";
    o << "pinv_iterations = " << c.pinv_iterations << "\n";
  }
  if (c.pad_multiple) o << "pad_multiple = " << *c.pad_multiple << "\n";
  return o.str();
}

ModelConfig parse_config_text(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (!kv.emplace(key, value).second) throw ConfigError("config key '" + key + "' given twice");
  }

  auto family_it = kv.find("family");
  if (family_it == kv.end()) throw ConfigError("config is missing 'family'");
  auto family = parse_family(family_it->second);
  if (!family) throw ConfigError("unknown family '" + family_it->second + "'");

  ModelConfig c;
  c.family = *family;
  for (const auto& [key, v] : kv) {
    if (key == "family") continue;
    else if (key == "name") c.name = v;
    else if (key == "preset") c.preset = v;
    else if (key == "d_model") c.d_model = parse_int(key, v);
    else if (key == "n_layers") c.n_layers = parse_int(key, v);
    else if (key == "n_heads") c.n_heads = parse_int(key, v);
    else if (key == "d_ff") c.d_ff = parse_int(key, v);
    else if (key == "layer_norm_eps") c.layer_norm_eps = static_cast<float>(parse_double(key, v));
    else if (key == "vocab_size") c.vocab_size = parse_int(key, v);
    else if (key == "type_vocab_size") c.type_vocab_size = parse_int(key, v);
    else if (key == "max_positions") c.max_positions = parse_int(key, v);
    else if (key == "pooler") {
      if (v != "true" && v != "false") throw ConfigError("config key 'pooler': expected true/false");
      c.pooler = v == "true";
    } else if (key == "attention_window") c.attention_window = parse_int(key, v);
    else if (key == "global_tokens") c.global_tokens = parse_int(key, v);
    else if (key == "n_landmarks") c.n_landmarks = parse_int(key, v);
    else if (key == "pinv_iterations") c.pinv_iterations = parse_int(key, v);
    else if (key == "patch_size") c.patch_size = parse_int(key, v);
    else if (key == "image_channels") c.image_channels = parse_int(key, v);
    else if (key == "stage_depths") {
      for (const auto& s : split(v, ',')) c.stage_depths.push_back(parse_int(key, s));
    } else if (key == "stage_heads") {
      for (const auto& s : split(v, ',')) c.stage_heads.push_back(parse_int(key, s));
    } else if (key == "swin_window") c.swin_window = parse_int(key, v);
    else if (key == "pad_multiple") c.pad_multiple = parse_int(key, v);
    else if (key == "featurizer") {
      for (const auto& layer : split(v, ',')) {
        auto parts = split(layer, ':');
        if (parts.size() != 3) throw ConfigError("featurizer layer '" + layer + "': expected channels:kernel:stride");
        c.featurizer.push_back({parse_int(key, parts[0]), parse_int(key, parts[1]), parse_int(key, parts[2])});
      }
    } else if (key == "sample_rate_hz") c.sample_rate_hz = parse_int(key, v);
    else if (key == "pos_conv_kernel") c.pos_conv_kernel = parse_int(key, v);
    else if (key == "pos_conv_groups") c.pos_conv_groups = parse_int(key, v);
    else if (key == "final_proj_dim") c.final_proj_dim = parse_int(key, v);
    else if (key == "framerate_hz") c.framerate_hz = parse_double(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  validate(c);
  return c;
}

ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

void save_config_file(const ModelConfig& config, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file " + path);
  out << to_config_text(config);
}

}  // namespace attnprof
