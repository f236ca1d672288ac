#include <doctest.h>

#include <filesystem>
#include <random>

#include "attnprof/costmodel/costmodel.hpp"
#include "attnprof/errors.hpp"
#include "attnprof/harness/harness.hpp"
#include "attnprof/modelzoo/presets.hpp"
#include "attnprof/numkernel/memory.hpp"

using namespace attnprof;

namespace {

constexpr std::int64_t kMs = 1'000'000;

// Each start/stop pair of readings is `durations[i]` apart.
class ScriptedClock final : public Clock {
 public:
  explicit ScriptedClock(std::vector<std::int64_t> durations) : durations_(std::move(durations)) {}
  std::int64_t now_ns() override {
    if (!started_) {
      started_ = true;
      return t_;
    }
    started_ = false;
    t_ += durations_.at(i_++);
    return t_;
  }

 private:
  std::vector<std::int64_t> durations_;
  std::size_t i_ = 0;
  std::int64_t t_ = 0;
  bool started_ = false;
};

ModelConfig tiny(std::string_view name) {
  ModelConfig c = preset_config(name, Preset::Desk);
  c.n_layers = 1;
  return c;
}

HarnessOptions quick() {
  HarnessOptions o;
  o.protocol = {2, 1};
  return o;
}

}  // namespace

TEST_CASE("protocol mean uses the last iterations only") {
  MeasurementProtocol p;
  std::vector<double> samples(20);
  for (int i = 0; i < 20; ++i) samples[i] = i < 10 ? 1000.0 : static_cast<double>(i);
  CHECK(protocol_mean(samples, p) == (10 + 19) / 2.0);
  CHECK_THROWS_AS(protocol_mean({1.0}, p), ConfigError);
  CHECK_THROWS_AS(validate(MeasurementProtocol{5, 6}), ConfigError);
}

TEST_CASE("a model taking 7 ms per iteration reports 7.0 ms") {
  const auto c = tiny("text-full");
  EncoderModel model(c, false, 0);
  FakeClock clock(0, 7 * kMs);
  HarnessOptions o;
  o.clock = &clock;
  const auto r = measure_latency(model, make_workload(c, 62, 0), Mode::Inference, o);
  CHECK(r.value == 7.0);
  CHECK(r.meta.total_iters == 20);
  CHECK(r.meta.reported_iters == 10);
  CHECK(r.tokens == 62);
}

TEST_CASE("warm-up inflation does not leak into the reported latency") {
  std::vector<std::int64_t> durations;
  for (int i = 0; i < 20; ++i) durations.push_back(i < 10 ? 500 * kMs : (3 + i % 4) * kMs);
  double expected = 0;
  for (int i = 10; i < 20; ++i) expected += static_cast<double>(durations[i]) / 1e6;
  expected /= 10;

  const auto c = tiny("text-full");
  EncoderModel model(c, false, 0);
  ScriptedClock clock(durations);
  HarnessOptions o;
  o.clock = &clock;
  CHECK(measure_latency(model, make_workload(c, 62, 0), Mode::Inference, o).value == expected);
}

TEST_CASE("batch 8 at 4 ms per step is 2000 examples per second") {
  const auto c = tiny("text-full");
  EncoderModel model(c, false, 0);
  FakeClock clock(0, 4 * kMs);
  HarnessOptions o;
  o.clock = &clock;
  const auto r = measure_throughput_at(model, make_workload(c, 62, 0), Mode::Inference, 8, o);
  CHECK(r.value == 2000.0);
  CHECK(r.meta.batch == 8);
}

TEST_CASE("layerwise latency sums to the total") {
  const auto c = tiny("text-full");
  EncoderModel model(c, false, 0);
  FakeClock clock(0, 1000);
  HarnessOptions o;
  o.clock = &clock;
  o.layerwise = true;
  const auto r = measure_latency(model, make_workload(c, 62, 0), Mode::Inference, o);
  double sum = 0;
  for (const auto& [tag, v] : r.breakdown) sum += v;
  CHECK(r.breakdown.count({TagKind::SelfAttention, 0}) == 1);
  CHECK(r.breakdown.count({TagKind::Intermediate, 0}) == 1);
  CHECK(sum == doctest::Approx(r.value).epsilon(1e-12));
}

TEST_CASE("estimator: linear memory gives the direct formula") {
  const MemoryProbe linear = [](std::int64_t b) { return b == 0 ? 1000 : 1000 + 100 * b; };
  const auto e = estimate_max_batch(linear, 45000);
  CHECK(e.resident_bytes == 1000);
  CHECK(e.batch1_bytes == 1100);
  CHECK(e.batch2_bytes == 1200);
  CHECK(e.initial_batch == 440);
  CHECK(e.batch == 440);
}

TEST_CASE("estimator: superlinear memory shrinks by 0.9 until it fits") {
  // Cubic excess that vanishes at batch 1 and 2.
  const MemoryProbe probe = [](std::int64_t b) {
    if (b == 0) return std::int64_t{1000};
    return 1000 + 100 * b + b * (b - 1) * (b - 2) / 8000;
  };
  const auto e = estimate_max_batch(probe, 45000);
  CHECK(e.initial_batch == 440);
  CHECK(e.trials == std::vector<std::int64_t>{440, 396, 356});
  CHECK(e.batch == 356);
}

TEST_CASE("estimator errors") {
  const MemoryProbe linear = [](std::int64_t b) { return b == 0 ? 1000 : 1000 + 100 * b; };
  CHECK_THROWS_AS(estimate_max_batch(linear, 900), EstimatorError);
  CHECK_THROWS_AS(estimate_max_batch(linear, 1050), EstimatorError);
  const MemoryProbe flat = [](std::int64_t b) { return b == 0 ? 1000 : 1100; };
  CHECK_THROWS_AS(estimate_max_batch(flat, 45000), EstimatorError);
  const MemoryProbe never = [](std::int64_t b) { return b == 0 ? 1000 : 50000 + 100 * b; };
  CHECK_THROWS_AS(estimate_max_batch(never, 45000), EstimatorError);
}

TEST_CASE("estimator result fits for monotone memory") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto base = static_cast<std::int64_t>(rng() % 1000);
    const auto lin = static_cast<std::int64_t>(1 + rng() % 50);
    const auto quad = static_cast<std::int64_t>(rng() % 5);
    const MemoryProbe probe = [=](std::int64_t b) { return b == 0 ? base : base + lin * b + quad * b * b; };
    const std::int64_t budget = base + 1 + static_cast<std::int64_t>(rng() % 100000);
    try {
      const auto e = estimate_max_batch(probe, budget);
      CHECK(e.batch >= 1);
      CHECK(probe(e.batch) <= budget);
    } catch (const EstimatorError&) {
      CHECK((probe(1) > budget || budget - base < probe(2) - probe(1)));
    }
  }
}

TEST_CASE("real-model probe and throughput estimate") {
  const auto c = tiny("text-full");
  EncoderModel model(c, false, 0);
  const auto work = make_workload(c, 62, 0);
  const auto probe0 = model_memory_probe(model, work.input, Mode::Inference, kDefaultBudgetBytes);
  const auto m1 = probe0(1), m2 = probe0(2);
  CHECK(m2 > m1);
  const std::int64_t budget = probe0(0) + 6 * (m2 - m1);
  const auto probe = model_memory_probe(model, work.input, Mode::Inference, budget);
  const auto e = estimate_max_batch(probe, budget);
  CHECK(e.batch >= 1);
  CHECK(probe(e.batch) <= budget);

  HarnessOptions o = quick();
  o.budget_bytes = budget;
  const auto r = measure_throughput(model, work, Mode::Inference, o);
  CHECK(r.meta.batch == e.batch);
  CHECK(r.value > 0);
}

TEST_CASE("max memory matches the cost model and orders by mode") {
  const auto c = preset_config("text-full", Preset::Desk);
  EncoderModel inference(c, false, 0);
  const auto small = make_workload(c, 62, 0);
  const auto r = measure_max_memory(inference, small, Mode::Inference, {});
  CHECK(r.value >= static_cast<double>(inference.parameter_bytes()));
  CHECK(r.value == static_cast<double>(flops_of(c, 62).peak_bytes));
  double composed = 0;
  for (const auto& [tag, v] : r.breakdown) composed += v;
  CHECK(composed <= r.value);

  EncoderModel trainable(c, true, 0);
  const auto infer_head = measure_max_memory(trainable, small, Mode::Inference, {});
  const auto train = measure_max_memory(trainable, small, Mode::Training, {});
  CHECK(train.value > infer_head.value);
  CHECK(train.meta.optimizer_update);
}

TEST_CASE("full-attention activation peak roughly quadruples from 1024 to 2048") {
  const auto c = preset_config("text-full", Preset::Desk);
  EncoderModel model(c, false, 0);
  const double resident = static_cast<double>(model.parameter_bytes());
  const double a = measure_max_memory(model, make_workload(c, 1024, 0), Mode::Inference, {}).value - resident;
  const double b = measure_max_memory(model, make_workload(c, 2048, 0), Mode::Inference, {}).value - resident;
  const double oracle = static_cast<double>(flops_of(c, 2048).peak_bytes - model.parameter_bytes()) /
                        static_cast<double>(flops_of(c, 1024).peak_bytes - model.parameter_bytes());
  CHECK(b / a == doctest::Approx(oracle).epsilon(0.2));
  CHECK(b / a >= 3.5 * 0.8);
}

TEST_CASE("measured latency and throughput orderings") {
  const auto full = preset_config("text-full", Preset::Desk);
  EncoderModel model(full, true, 0);
  const auto o = quick();
  const auto short_run = measure_latency(model, make_workload(full, 512, 0), Mode::Inference, o);
  const auto long_run = measure_latency(model, make_workload(full, 2048, 0), Mode::Inference, o);
  CHECK(long_run.value > short_run.value);

  const auto work = make_workload(full, 256, 0);
  const auto infer = measure_throughput_at(model, work, Mode::Inference, 2, o);
  const auto train = measure_throughput_at(model, work, Mode::Training, 2, o);
  CHECK(train.value < infer.value);
}

TEST_CASE("modality mismatch and missing head are rejected") {
  const auto c = tiny("text-full");
  EncoderModel model(c, false, 0);
  const auto image = make_workload(preset_config("vision-full", Preset::Desk), 32, 0);
  CHECK_THROWS_AS(measure_latency(model, image, Mode::Inference, quick()), ConfigError);
  CHECK_THROWS_AS(measure_latency(model, make_workload(c, 62, 0), Mode::Training, quick()), ConfigError);
}

TEST_CASE("sweeps are complete, ordered and resumable") {
  const auto dir = std::filesystem::temp_directory_path() / "attnprof_harness_sweep";
  std::filesystem::remove_all(dir);
  SweepOutput out{(dir / "sweep.json").string(), ""};

  SweepPlan plan;
  plan.models = {tiny("text-full"), tiny("text-sliding")};
  plan.grid = {62, 122, 182};
  plan.metrics = {Metric::LatencyMs, Metric::Flops};
  SweepProgress first;
  const auto sweep = run_sweep(plan, quick(), out, &first);
  CHECK(sweep.records.size() == 12);
  CHECK(first.measured == 12);
  CHECK(first.failed == 0);
  CHECK(std::filesystem::exists(dir / "sweep.csv"));
  CHECK(sweep.records[0].model == "text-full");
  CHECK(sweep.records[0].metric == Metric::LatencyMs);
  CHECK(sweep.records[0].source == Source::Empirical);
  CHECK(sweep.records[1].metric == Metric::Flops);
  CHECK(sweep.records[1].source == Source::Analytic);
  CHECK(sweep.records[11].model == "text-sliding");
  CHECK(sweep.records[11].size == 182);

  SweepProgress second;
  const auto again = run_sweep(plan, quick(), out, &second);
  CHECK(second.measured == 0);
  CHECK(second.skipped == 12);
  CHECK(again == sweep);
  std::filesystem::remove_all(dir);
}

TEST_CASE("a failing point becomes an error record") {
  SweepPlan plan;
  plan.models = {tiny("text-full")};
  plan.grid = {62, 122};
  plan.metrics = {Metric::MaxMemoryBytes, Metric::ParamCount};
  HarnessOptions o = quick();
  EncoderModel probe(plan.models[0], false, 0);
  o.budget_bytes = static_cast<std::int64_t>(nk::accountant().current_bytes()) + probe.parameter_bytes() + 1024;
  SweepProgress progress;
  const auto sweep = run_sweep(plan, o, {}, &progress);
  REQUIRE(sweep.records.size() == 4);
  CHECK(progress.failed == 2);
  CHECK(sweep.records[0].error.has_value());
  CHECK(sweep.records[0].value == 0.0);
  CHECK_FALSE(sweep.records[1].error.has_value());
  CHECK(sweep.records[1].value == static_cast<double>(count_params(plan.models[0]).total()));
}
