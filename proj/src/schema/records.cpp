#include "attnprof/schema/records.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "attnprof/errors.hpp"

namespace attnprof {

using nlohmann::json;

std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::LatencyMs: return "latency_ms";
    case Metric::ThroughputExPerSec: return "throughput_ex_per_sec";
    case Metric::MaxMemoryBytes: return "max_memory_bytes";
    case Metric::ParamCount: return "param_count";
    case Metric::Flops: return "flops";
  }
  return "latency_ms";
}

const std::vector<Metric>& all_metrics() {
  static const std::vector<Metric> metrics = {Metric::LatencyMs, Metric::ThroughputExPerSec, Metric::MaxMemoryBytes,
                                              Metric::ParamCount, Metric::Flops};
  return metrics;
}

std::optional<Metric> parse_metric(std::string_view name) {
  for (Metric m : all_metrics())
    if (metric_name(m) == name) return m;
  if (name == "latency") return Metric::LatencyMs;
  if (name == "throughput") return Metric::ThroughputExPerSec;
  if (name == "memory" || name == "max_memory") return Metric::MaxMemoryBytes;
  if (name == "params") return Metric::ParamCount;
  return std::nullopt;
}

std::string_view source_name(Source s) { return s == Source::Empirical ? "empirical" : "analytic"; }

std::optional<Source> parse_source(std::string_view name) {
  if (name == "empirical") return Source::Empirical;
  if (name == "analytic") return Source::Analytic;
  return std::nullopt;
}

std::string format_number(double v) {
  if (std::isfinite(v) && v == std::floor(v) && std::abs(v) < 1e15) return std::to_string(static_cast<std::int64_t>(v));
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return ec == std::errc() ? std::string(buf, end) : std::string("nan");
}

std::string ProfileRecord::key() const {
  return model + "|" + preset + "|" + std::string(mode_name(mode)) + "|" + std::string(metric_name(metric)) + "|" +
         std::string(source_name(source)) + "|" + format_number(size) + "|" + std::to_string(meta.repeat);
}

json to_json(const ProfileRecord& r) {
  json breakdown = json::object();
  for (const auto& [tag, v] : r.breakdown) breakdown[to_string(tag)] = v;
  json j = {
      {"model", r.model},
      {"preset", r.preset},
      {"modality", modality_name(r.modality)},
      {"mode", mode_name(r.mode)},
      {"metric", metric_name(r.metric)},
      {"source", source_name(r.source)},
      {"size", r.size},
      {"tokens", r.tokens},
      {"value", r.value},
      {"breakdown", breakdown},
      {"metadata",
       {{"threads", r.meta.threads},
        {"timer_overhead_ns", r.meta.timer_overhead_ns},
        {"budget_bytes", r.meta.budget_bytes},
        {"seed", r.meta.seed},
        {"total_iters", r.meta.total_iters},
        {"reported_iters", r.meta.reported_iters},
        {"batch", r.meta.batch},
        {"optimizer_update", r.meta.optimizer_update},
        {"repeat", r.meta.repeat}}},
      {"error", r.error ? json(*r.error) : json(nullptr)},
  };
  return j;
}

namespace {

template <typename T, typename Parse>
T parse_enum(const json& j, const char* field, Parse parse) {
  const std::string s = j.at(field).get<std::string>();
  const auto v = parse(s);
  if (!v) throw ConfigError(std::string("record: unknown ") + field + " '" + s + "'");
  return *v;
}

}  // namespace

ProfileRecord record_from_json(const json& j) {
  try {
    ProfileRecord r;
    r.model = j.at("model").get<std::string>();
    r.preset = j.at("preset").get<std::string>();
    r.modality = parse_enum<Modality>(j, "modality", parse_modality);
    r.mode = parse_enum<Mode>(j, "mode", parse_mode);
    r.metric = parse_enum<Metric>(j, "metric", parse_metric);
    r.source = parse_enum<Source>(j, "source", parse_source);
    r.size = j.at("size").get<double>();
    r.tokens = j.at("tokens").get<std::int64_t>();
    r.value = j.at("value").get<double>();
    if (j.contains("breakdown")) {
      for (const auto& [k, v] : j.at("breakdown").items()) {
        const auto tag = parse_layer_tag(k);
        if (!tag) throw ConfigError("record: bad breakdown tag '" + k + "'");
        r.breakdown[*tag] = v.get<double>();
      }
    }
    if (j.contains("metadata")) {
      const json& m = j.at("metadata");
      r.meta.threads = m.value("threads", 1);
      r.meta.timer_overhead_ns = m.value("timer_overhead_ns", 0.0);
      r.meta.budget_bytes = m.value("budget_bytes", std::int64_t{0});
      r.meta.seed = m.value("seed", std::uint64_t{0});
      r.meta.total_iters = m.value("total_iters", 20);
      r.meta.reported_iters = m.value("reported_iters", 10);
      r.meta.batch = m.value("batch", std::int64_t{1});
      r.meta.optimizer_update = m.value("optimizer_update", false);
      r.meta.repeat = m.value("repeat", 0);
    }
    if (j.contains("error") && !j.at("error").is_null()) r.error = j.at("error").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("record: ") + e.what());
  }
}

std::string sweep_to_json(const SweepResult& sweep) {
  json records = json::array();
  for (const auto& r : sweep.records) records.push_back(to_json(r));
  return json{{"records", records}}.dump(2) + "\n";
}

SweepResult sweep_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sweep json: ") + e.what());
  }
  if (!j.is_object() || !j.contains("records") || !j.at("records").is_array()) {
    throw ConfigError("sweep json: expected an object with a 'records' array");
  }
  SweepResult out;
  for (const auto& r : j.at("records")) out.records.push_back(record_from_json(r));
  return out;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string sweep_to_csv(const SweepResult& sweep) {
  std::ostringstream os;
  os << "model,preset,modality,mode,metric,source,size,tokens,value,threads,budget_bytes,seed,batch,repeat,"
        "timer_overhead_ns,breakdown,error\n";
  for (const auto& r : sweep.records) {
    std::string breakdown;
    for (const auto& [tag, v] : r.breakdown) {
      if (!breakdown.empty()) breakdown += ';';
      breakdown += to_string(tag) + "=" + format_number(v);
    }
    os << csv_field(r.model) << ',' << csv_field(r.preset) << ',' << modality_name(r.modality) << ','
       << mode_name(r.mode) << ',' << metric_name(r.metric) << ',' << source_name(r.source) << ','
       << format_number(r.size) << ',' << r.tokens << ',' << format_number(r.value) << ',' << r.meta.threads << ','
       << r.meta.budget_bytes << ',' << r.meta.seed << ',' << r.meta.batch << ',' << r.meta.repeat << ','
       << format_number(r.meta.timer_overhead_ns) << ',' << csv_field(breakdown) << ','
       << csv_field(r.error.value_or("")) << '\n';
  }
  return os.str();
}

SweepResult load_sweep(const std::string& path) {
  std::ifstream in(path);
  if (!in) return {};
  std::stringstream ss;
  ss << in.rdbuf();
  if (ss.str().find_first_not_of(" \t\r\n") == std::string::npos) return {};
  return sweep_from_json(ss.str());
}

void save_sweep(const SweepResult& sweep, const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp);
    out << sweep_to_json(sweep);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace attnprof
