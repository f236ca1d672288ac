#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "attnprof/instrument/clock.hpp"
#include "attnprof/modelzoo/model.hpp"
#include "attnprof/schema/records.hpp"
#include "attnprof/workloads/workloads.hpp"

namespace attnprof {

inline constexpr std::int64_t kDefaultBudgetBytes = std::int64_t{4} << 30;

struct MeasurementProtocol {
  int total_iters = 20;
  int reported_iters = 10;  // the last ones; the rest are warm-up
};

// Throws ConfigError unless 0 < reported_iters <= total_iters.
void validate(const MeasurementProtocol& protocol);

// Mean of the last `reported_iters` samples.
double protocol_mean(const std::vector<double>& samples, const MeasurementProtocol& protocol);

// Per-iteration wall time of `step`, in ns, for all total_iters iterations.
std::vector<std::int64_t> run_protocol(Clock& clock, const MeasurementProtocol& protocol,
                                       const std::function<void()>& step);

struct HarnessOptions {
  MeasurementProtocol protocol;
  Clock* clock = nullptr;  // steady clock when null
  std::int64_t budget_bytes = kDefaultBudgetBytes;
  int threads = 1;
  std::uint64_t seed = 0;
  int repeat = 0;
  bool layerwise = false;         // attach per-tag latency breakdowns
  double timer_overhead_ns = 0.0; // copied into metadata
  std::string preset;
};

// One grid point with its generated input.
struct Workload {
  double size = 0.0;
  ModelInput input;
};

Workload make_workload(const ModelConfig& config, double size, std::uint64_t seed);

// Batch-1 latency in ms under the protocol. Training runs train_step.
// Throws ConfigError when the input modality does not match the model.
ProfileRecord measure_latency(EncoderModel& model, const Workload& work, Mode mode, const HarnessOptions& options);

// Peak accounted bytes over one batch-1 step. The breakdown is the live bytes
// per tag at the moment of the peak, so it never sums above the value.
ProfileRecord measure_max_memory(EncoderModel& model, const Workload& work, Mode mode,
                                 const HarnessOptions& options);

// Peak accounted bytes for a batch size; batch 0 means "model only".
using MemoryProbe = std::function<std::int64_t(std::int64_t batch)>;

struct BatchEstimate {
  std::int64_t resident_bytes = 0;  // B
  std::int64_t batch1_bytes = 0;    // M1
  std::int64_t batch2_bytes = 0;    // M2
  std::int64_t initial_batch = 0;   // floor((budget - B) / (M2 - M1))
  std::int64_t batch = 0;           // first trial that fit
  std::vector<std::int64_t> trials;
};

// Linear extrapolation from batch 1 and 2, then shrink by floor(0.9 * bsz)
// until a trial fits. Throws EstimatorError when M2 <= M1, the budget does
// not exceed B, or the batch reaches 0.
BatchEstimate estimate_max_batch(const MemoryProbe& probe, std::int64_t budget_bytes);

// Probe backed by real runs under a ScopedBudget. A run that hits the budget
// reports budget + 1 bytes.
MemoryProbe model_memory_probe(EncoderModel& model, const ModelInput& input, Mode mode, std::int64_t budget_bytes);

// Examples/sec at the estimated maximum batch.
ProfileRecord measure_throughput(EncoderModel& model, const Workload& work, Mode mode, const HarnessOptions& options);
// Examples/sec at a fixed batch.
ProfileRecord measure_throughput_at(EncoderModel& model, const Workload& work, Mode mode, std::int64_t batch,
                                    const HarnessOptions& options);

ProfileRecord measure(EncoderModel& model, const Workload& work, Mode mode, Metric metric,
                      const HarnessOptions& options);

struct SweepPlan {
  std::vector<ModelConfig> models;
  // Grid per model; empty means the model's default grid.
  std::vector<double> grid;
  std::vector<Metric> metrics;
  Mode mode = Mode::Inference;
  int repeats = 1;
};

struct SweepProgress {
  std::size_t measured = 0;  // new records this run
  std::size_t skipped = 0;   // already present in the output
  std::size_t failed = 0;    // new records carrying an error
};

struct SweepOutput {
  std::string json_path;  // empty: keep in memory only
  std::string csv_path;   // written next to the JSON when empty and json_path is set
};

// Runs model x size x metric x repeat in that order. Existing records with
// the same key are kept and not re-measured. Flops and ParamCount come from
// the cost model (source "analytic"); the rest are measured. A failing
// measurement yields a record with `error` set. The result is saved after
// every new record.
SweepResult run_sweep(const SweepPlan& plan, const HarnessOptions& options, const SweepOutput& output = {},
                      SweepProgress* progress = nullptr, SweepResult existing = {});

}  // namespace attnprof
