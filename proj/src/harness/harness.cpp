#include "attnprof/harness/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <set>

#include "attnprof/costmodel/costmodel.hpp"
#include "attnprof/errors.hpp"
#include "attnprof/instrument/profile.hpp"
#include "attnprof/instrument/timer_tree.hpp"
#include "attnprof/numkernel/memory.hpp"
#include "attnprof/numkernel/parallel.hpp"

namespace attnprof {

void validate(const MeasurementProtocol& protocol) {
  if (protocol.total_iters < 1 || protocol.reported_iters < 1 || protocol.reported_iters > protocol.total_iters) {
    throw ConfigError("protocol: need 0 < reported_iters <= total_iters");
  }
}

double protocol_mean(const std::vector<double>& samples, const MeasurementProtocol& protocol) {
  validate(protocol);
  if (samples.size() < static_cast<std::size_t>(protocol.reported_iters)) {
    throw ConfigError("protocol: fewer samples than reported iterations");
  }
  const auto first = samples.end() - protocol.reported_iters;
  return std::accumulate(first, samples.end(), 0.0) / protocol.reported_iters;
}

std::vector<std::int64_t> run_protocol(Clock& clock, const MeasurementProtocol& protocol,
                                       const std::function<void()>& step) {
  validate(protocol);
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(protocol.total_iters));
  for (int i = 0; i < protocol.total_iters; ++i) {
    const auto t0 = clock.now_ns();
    step();
    out.push_back(clock.now_ns() - t0);
  }
  return out;
}

namespace {

Clock& clock_of(const HarnessOptions& o) { return o.clock ? *o.clock : SteadyClock::instance(); }

void check_input(const EncoderModel& model, const Workload& work, Mode mode) {
  if (input_modality(work.input) != model.config().modality()) {
    throw ConfigError(model.config().name + ": expected " + std::string(modality_name(model.config().modality())) +
                      " input, got " + std::string(modality_name(input_modality(work.input))));
  }
  if (mode == Mode::Training && !model.has_head()) {
    throw ConfigError(model.config().name + ": training needs the classification head");
  }
}

std::function<void()> step_fn(EncoderModel& model, const ModelInput& input, Mode mode, std::int64_t batch) {
  if (mode == Mode::Training) return [&model, &input, batch] { model.train_step(input, batch); };
  return [&model, &input, batch] { model.forward(input, batch); };
}

ProfileRecord base_record(const EncoderModel& model, const Workload& work, Mode mode, Metric metric,
                          const HarnessOptions& o) {
  const auto& c = model.config();
  ProfileRecord r;
  r.model = c.name;
  r.preset = o.preset.empty() ? c.preset : o.preset;
  r.modality = c.modality();
  r.mode = mode;
  r.metric = metric;
  r.source = Source::Empirical;
  r.size = work.size;
  r.tokens = model.input_shape(work.input).tokens;
  r.meta.threads = o.threads;
  r.meta.timer_overhead_ns = o.timer_overhead_ns;
  r.meta.budget_bytes = o.budget_bytes;
  r.meta.seed = o.seed;
  r.meta.total_iters = o.protocol.total_iters;
  r.meta.reported_iters = o.protocol.reported_iters;
  r.meta.batch = 1;
  r.meta.optimizer_update = mode == Mode::Training;
  r.meta.repeat = o.repeat;
  return r;
}

std::optional<std::size_t> budget_of(const HarnessOptions& o) {
  if (o.budget_bytes <= 0) return std::nullopt;
  return static_cast<std::size_t>(o.budget_bytes);
}

}  // namespace

Workload make_workload(const ModelConfig& config, double size, std::uint64_t seed) {
  return {size, make_input(config, size, seed)};
}

ProfileRecord measure_latency(EncoderModel& model, const Workload& work, Mode mode, const HarnessOptions& options) {
  check_input(model, work, mode);
  validate(options.protocol);
  ProfileRecord r = base_record(model, work, mode, Metric::LatencyMs, options);
  Clock& clock = clock_of(options);
  nk::ScopedBudget budget(budget_of(options));
  const auto step = step_fn(model, work.input, mode, 1);

  std::vector<double> totals;
  std::map<LayerTag, std::vector<double>> per_tag;
  for (int i = 0; i < options.protocol.total_iters; ++i) {
    if (options.layerwise) {
      const auto b = profile_layerwise(clock, step);
      totals.push_back(static_cast<double>(b.total_ns));
      for (auto& [tag, v] : per_tag) v.push_back(0.0);
      for (const auto& [tag, ns] : b.per_tag_ns) {
        auto& v = per_tag[tag];
        v.resize(totals.size(), 0.0);
        v.back() = static_cast<double>(ns);
      }
    } else {
      const auto t0 = clock.now_ns();
      step();
      totals.push_back(static_cast<double>(clock.now_ns() - t0));
    }
  }
  r.value = protocol_mean(totals, options.protocol) / 1e6;
  for (const auto& [tag, v] : per_tag) r.breakdown[tag] = protocol_mean(v, options.protocol) / 1e6;
  return r;
}

ProfileRecord measure_max_memory(EncoderModel& model, const Workload& work, Mode mode, const HarnessOptions& options) {
  check_input(model, work, mode);
  ProfileRecord r = base_record(model, work, mode, Metric::MaxMemoryBytes, options);
  r.meta.total_iters = 1;
  r.meta.reported_iters = 1;
  nk::ScopedBudget budget(budget_of(options));
  const auto step = step_fn(model, work.input, mode, 1);
  const MemoryReport report = measure_peak_memory(step);
  r.value = static_cast<double>(report.peak_bytes);
  for (const auto& [tag, bytes] : report.per_tag_at_peak) r.breakdown[tag] = static_cast<double>(bytes);
  return r;
}

BatchEstimate estimate_max_batch(const MemoryProbe& probe, std::int64_t budget_bytes) {
  BatchEstimate e;
  e.resident_bytes = probe(0);
  if (budget_bytes <= e.resident_bytes) {
    throw EstimatorError("budget " + std::to_string(budget_bytes) + " bytes does not exceed the model's resident " +
                         std::to_string(e.resident_bytes) + " bytes");
  }
  e.batch1_bytes = probe(1);
  e.batch2_bytes = probe(2);
  if (e.batch2_bytes <= e.batch1_bytes) {
    throw EstimatorError("degenerate estimate: batch-2 memory " + std::to_string(e.batch2_bytes) +
                         " <= batch-1 memory " + std::to_string(e.batch1_bytes));
  }
  e.initial_batch = (budget_bytes - e.resident_bytes) / (e.batch2_bytes - e.batch1_bytes);
  std::int64_t bsz = e.initial_batch;
  while (bsz >= 1) {
    e.trials.push_back(bsz);
    if (probe(bsz) <= budget_bytes) {
      e.batch = bsz;
      return e;
    }
    bsz = static_cast<std::int64_t>(std::floor(0.9 * static_cast<double>(bsz)));
  }
  throw EstimatorError("budget too small: no batch size >= 1 fits in " + std::to_string(budget_bytes) + " bytes");
}

MemoryProbe model_memory_probe(EncoderModel& model, const ModelInput& input, Mode mode, std::int64_t budget_bytes) {
  return [&model, &input, mode, budget_bytes](std::int64_t batch) -> std::int64_t {
    if (batch == 0) return static_cast<std::int64_t>(nk::accountant().current_bytes());
    nk::ScopedBudget budget(static_cast<std::size_t>(budget_bytes));
    try {
      const auto report = measure_peak_memory(step_fn(model, input, mode, batch));
      return static_cast<std::int64_t>(report.peak_bytes);
    } catch (const OutOfBudgetError&) {
      return budget_bytes + 1;
    }
  };
}

ProfileRecord measure_throughput_at(EncoderModel& model, const Workload& work, Mode mode, std::int64_t batch,
                                    const HarnessOptions& options) {
  check_input(model, work, mode);
  if (batch < 1) throw ConfigError("throughput batch must be >= 1");
  ProfileRecord r = base_record(model, work, mode, Metric::ThroughputExPerSec, options);
  r.meta.batch = batch;
  nk::ScopedBudget budget(budget_of(options));
  const auto samples = run_protocol(clock_of(options), options.protocol, step_fn(model, work.input, mode, batch));
  const double mean_ns = protocol_mean(std::vector<double>(samples.begin(), samples.end()), options.protocol);
  if (!(mean_ns > 0.0)) throw NumericalError("throughput: zero elapsed time");
  r.value = static_cast<double>(batch) * 1e9 / mean_ns;
  return r;
}

ProfileRecord measure_throughput(EncoderModel& model, const Workload& work, Mode mode, const HarnessOptions& options) {
  check_input(model, work, mode);
  const auto estimate =
      estimate_max_batch(model_memory_probe(model, work.input, mode, options.budget_bytes), options.budget_bytes);
  return measure_throughput_at(model, work, mode, estimate.batch, options);
}

ProfileRecord measure(EncoderModel& model, const Workload& work, Mode mode, Metric metric,
                      const HarnessOptions& options) {
  switch (metric) {
    case Metric::LatencyMs: return measure_latency(model, work, mode, options);
    case Metric::ThroughputExPerSec: return measure_throughput(model, work, mode, options);
    case Metric::MaxMemoryBytes: return measure_max_memory(model, work, mode, options);
    case Metric::ParamCount: {
      ProfileRecord r = base_record(model, work, mode, metric, options);
      r.meta.total_iters = 0;
      r.meta.reported_iters = 0;
      const auto report = param_report(model);
      for (const auto& [tag, c] : report.per_tag) {
        if (c.params != 0) r.breakdown[tag] = static_cast<double>(c.params);
      }
      r.value = static_cast<double>(report.total().params);
      return r;
    }
    case Metric::Flops: break;
  }
  throw ConfigError("metric " + std::string(metric_name(metric)) + " is analytic only");
}

namespace {

std::string csv_path_for(const SweepOutput& out) {
  if (!out.csv_path.empty()) return out.csv_path;
  std::filesystem::path p(out.json_path);
  return p.replace_extension(".csv").string();
}

void persist(const SweepResult& sweep, const SweepOutput& out) {
  if (out.json_path.empty()) return;
  save_sweep(sweep, out.json_path);
  const std::string csv = csv_path_for(out);
  const std::string tmp = csv + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + tmp);
    f << sweep_to_csv(sweep);
  }
  std::filesystem::rename(tmp, csv);
}

ProfileRecord skeleton(const ModelConfig& c, double size, Metric metric, Mode mode, int repeat,
                       const HarnessOptions& o) {
  ProfileRecord r;
  r.model = c.name;
  r.preset = o.preset.empty() ? c.preset : o.preset;
  r.modality = c.modality();
  r.mode = mode;
  r.metric = metric;
  r.source = metric == Metric::Flops ? Source::Analytic : Source::Empirical;
  r.size = size;
  r.meta.threads = o.threads;
  r.meta.timer_overhead_ns = o.timer_overhead_ns;
  r.meta.budget_bytes = o.budget_bytes;
  r.meta.seed = o.seed;
  r.meta.total_iters = o.protocol.total_iters;
  r.meta.reported_iters = o.protocol.reported_iters;
  r.meta.optimizer_update = mode == Mode::Training;
  r.meta.repeat = repeat;
  return r;
}

}  // namespace

SweepResult run_sweep(const SweepPlan& plan, const HarnessOptions& options, const SweepOutput& output,
                      SweepProgress* progress, SweepResult existing) {
  validate(options.protocol);
  if (plan.repeats < 1) throw ConfigError("repeats must be >= 1");
  if (plan.metrics.empty()) throw ConfigError("sweep needs at least one metric");
  if (existing.records.empty() && !output.json_path.empty()) existing = load_sweep(output.json_path);

  SweepResult result = std::move(existing);
  std::set<std::string> done;
  for (const auto& r : result.records) done.insert(r.key());
  SweepProgress local;
  SweepProgress& prog = progress ? *progress : local;
  nk::set_thread_count(options.threads);

  for (const ModelConfig& config : plan.models) {
    validate(config);
    const std::vector<double> grid = plan.grid.empty() ? default_grid(config.modality()).points : plan.grid;
    std::unique_ptr<EncoderModel> model;
    for (double size : grid) {
      for (Metric metric : plan.metrics) {
        for (int repeat = 0; repeat < plan.repeats; ++repeat) {
          ProfileRecord rec = skeleton(config, size, metric, plan.mode, repeat, options);
          if (done.count(rec.key())) {
            ++prog.skipped;
            continue;
          }
          try {
            if (metric == Metric::Flops) {
              auto analytic = analytic_records(config, {size}, {metric}, plan.mode).front();
              analytic.preset = rec.preset;
              analytic.meta = rec.meta;
              analytic.meta.total_iters = 0;
              analytic.meta.reported_iters = 0;
              rec = std::move(analytic);
            } else {
              if (!model) model = std::make_unique<EncoderModel>(config, plan.mode == Mode::Training, options.seed);
              HarnessOptions o = options;
              o.repeat = repeat;
              o.preset = rec.preset;
              const Workload work = make_workload(config, size, options.seed + static_cast<std::uint64_t>(repeat));
              rec = measure(*model, work, plan.mode, metric, o);
            }
          } catch (const std::exception& e) {
            rec.tokens = tokens_for(config, size);
            rec.value = 0.0;
            rec.breakdown.clear();
            rec.error = e.what();
            ++prog.failed;
          }
          done.insert(rec.key());
          result.records.push_back(std::move(rec));
          ++prog.measured;
          persist(result, output);
        }
      }
    }
  }
  if (prog.measured == 0) persist(result, output);
  return result;
}

}  // namespace attnprof
