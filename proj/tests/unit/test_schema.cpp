#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "attnprof/errors.hpp"
#include "attnprof/schema/records.hpp"

using namespace attnprof;

namespace {

ProfileRecord sample_record() {
  ProfileRecord r;
  r.model = "text-full";
  r.preset = "desk";
  r.modality = Modality::Text;
  r.mode = Mode::Training;
  r.metric = Metric::LatencyMs;
  r.size = 62;
  r.tokens = 62;
  r.value = 3.25;
  r.breakdown[{TagKind::SelfAttention, 0}] = 1.5;
  r.breakdown[{TagKind::Other, 0}] = 0.25;
  r.meta.threads = 2;
  r.meta.seed = 9;
  r.meta.budget_bytes = 1 << 20;
  r.meta.optimizer_update = true;
  r.meta.timer_overhead_ns = 41.5;
  return r;
}

}  // namespace

TEST_CASE("metric names round trip") {
  for (Metric m : all_metrics()) CHECK(parse_metric(metric_name(m)) == m);
  CHECK(parse_metric("latency") == Metric::LatencyMs);
  CHECK(parse_metric("memory") == Metric::MaxMemoryBytes);
  CHECK_FALSE(parse_metric("latncy").has_value());
}

TEST_CASE("records round trip through json") {
  SweepResult sweep;
  sweep.records.push_back(sample_record());
  auto failed = sample_record();
  failed.metric = Metric::MaxMemoryBytes;
  failed.source = Source::Analytic;
  failed.size = 1.5;
  failed.breakdown.clear();
  failed.error = "out of budget";
  sweep.records.push_back(failed);

  const auto text = sweep_to_json(sweep);
  CHECK(sweep_from_json(text) == sweep);
  CHECK(sweep_to_json(sweep_from_json(text)) == text);
  CHECK_THROWS_AS(sweep_from_json("{\"records\": 3}"), ConfigError);
  CHECK_THROWS_AS(sweep_from_json("not json"), ConfigError);
}

TEST_CASE("keys separate everything a resume must distinguish") {
  auto a = sample_record();
  auto b = a;
  CHECK(a.key() == b.key());
  b.value = 99;
  CHECK(a.key() == b.key());
  b.source = Source::Analytic;
  CHECK(a.key() != b.key());
  b = a;
  b.meta.repeat = 1;
  CHECK(a.key() != b.key());
  b = a;
  b.size = 1.5;
  CHECK(b.key().find("|1.5|") != std::string::npos);
}

TEST_CASE("csv has one row per record") {
  SweepResult sweep;
  sweep.records.push_back(sample_record());
  auto r = sample_record();
  r.error = "bad, \"quoted\"";
  sweep.records.push_back(r);
  const auto csv = sweep_to_csv(sweep);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("SelfAttention[0]=1.5;Other[0]=0.25") != std::string::npos);
  CHECK(csv.find("\"bad, \"\"quoted\"\"\"") != std::string::npos);
}

TEST_CASE("save and load") {
  const auto dir = std::filesystem::temp_directory_path() / "attnprof_schema_test";
  std::filesystem::remove_all(dir);
  const auto path = (dir / "sub" / "sweep.json").string();
  CHECK(load_sweep(path).records.empty());
  SweepResult sweep;
  sweep.records.push_back(sample_record());
  save_sweep(sweep, path);
  CHECK(load_sweep(path) == sweep);
  std::filesystem::remove_all(dir);
}

TEST_CASE("number formatting") {
  CHECK(format_number(62) == "62");
  CHECK(format_number(1.5) == "1.5");
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(-3) == "-3");
}
