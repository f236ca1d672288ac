#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "attnprof/layer_tag.hpp"
#include "attnprof/modelzoo/config.hpp"

namespace attnprof {

enum class Metric { LatencyMs, ThroughputExPerSec, MaxMemoryBytes, ParamCount, Flops };

std::string_view metric_name(Metric m);
std::optional<Metric> parse_metric(std::string_view name);
const std::vector<Metric>& all_metrics();

enum class Source { Empirical, Analytic };

std::string_view source_name(Source s);
std::optional<Source> parse_source(std::string_view name);

struct RunMetadata {
  int threads = 1;
  double timer_overhead_ns = 0.0;  // calibrated empty-region cost, not subtracted
  std::int64_t budget_bytes = 0;
  std::uint64_t seed = 0;
  int total_iters = 20;
  int reported_iters = 10;
  std::int64_t batch = 1;
  bool optimizer_update = false;  // training steps include one SGD update
  int repeat = 0;

  friend bool operator==(const RunMetadata&, const RunMetadata&) = default;
};

struct ProfileRecord {
  std::string model;
  std::string preset;
  Modality modality = Modality::Text;
  Mode mode = Mode::Inference;
  Metric metric = Metric::LatencyMs;
  Source source = Source::Empirical;
  double size = 0.0;         // grid value: tokens, seconds, or pixels
  std::int64_t tokens = 0;   // encoder sequence length after padding/featurizing
  double value = 0.0;
  std::map<LayerTag, double> breakdown;
  RunMetadata meta;
  std::optional<std::string> error;

  // Identity used for resuming sweeps.
  std::string key() const;

  friend bool operator==(const ProfileRecord&, const ProfileRecord&) = default;
};

struct SweepResult {
  std::vector<ProfileRecord> records;

  friend bool operator==(const SweepResult&, const SweepResult&) = default;
};

nlohmann::json to_json(const ProfileRecord& r);
ProfileRecord record_from_json(const nlohmann::json& j);

// {"records": [...]}, pretty printed with sorted keys.
std::string sweep_to_json(const SweepResult& sweep);
SweepResult sweep_from_json(std::string_view text);

// One row per record; breakdown flattened as "Tag[i]=value;..." in one column.
std::string sweep_to_csv(const SweepResult& sweep);

// Missing file -> empty sweep. Throws ConfigError on malformed content.
SweepResult load_sweep(const std::string& path);
void save_sweep(const SweepResult& sweep, const std::string& path);

// Fixed formatting for sizes in keys, file names and CSV ("62", "1.5").
std::string format_number(double v);

}  // namespace attnprof
