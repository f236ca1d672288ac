#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "attnprof/costmodel/breakdown.hpp"
#include "attnprof/modelzoo/config.hpp"
#include "attnprof/schema/records.hpp"

namespace attnprof {

// Training ops are forward ops times this factor (forward + 2x backward).
inline constexpr std::int64_t kTrainingOpFactor = 3;

struct CostOptions {
  std::int64_t batch = 1;
  std::optional<bool> with_head;  // default: head only when training
};

// Closed-form cost of one forward (or training step) on an input of `size`
// model units: tokens, waveform samples, or square image side in pixels.
// Fills macs, elementwise ops, peak live activation bytes and parameters per
// tag, mirroring the kernels' tallies and the models' release order. An
// input that yields no encoder tokens gives an all-zero breakdown.
CostBreakdown flops_of(const ModelConfig& config, std::int64_t size, Mode mode = Mode::Inference,
                       const CostOptions& options = {});

enum class CostMetric { Flops, Bytes };

std::string_view cost_metric_name(CostMetric m);
std::optional<CostMetric> parse_cost_metric(std::string_view name);

// Total flops, or whole-model peak bytes.
double cost_value(const CostBreakdown& cost, CostMetric metric);

// Smallest x[i] from which `efficient[j] < vanilla[j]` holds for every j >= i.
std::optional<std::size_t> sustained_crossing(const std::vector<double>& vanilla, const std::vector<double>& efficient);

// Sustained crossover length on `grid` (model units), or none.
std::optional<std::int64_t> predict_tipping_point(const ModelConfig& vanilla, const ModelConfig& efficient,
                                                  CostMetric metric, const std::vector<std::int64_t>& grid,
                                                  Mode mode = Mode::Inference);

// Fraction of the metric not attributed to SelfAttention tags. Bytes use the
// per-tag activation peaks.
double non_sa_share(const ModelConfig& config, std::int64_t size, CostMetric metric);

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

// Flops of the SelfAttention tags only.
std::int64_t self_attention_flops(const CostBreakdown& cost);

// Records in the sweep schema with source "analytic": Flops, MaxMemoryBytes
// (bytes model) and ParamCount. Other metrics are skipped. `sizes` are grid
// values (tokens, seconds, pixels).
std::vector<ProfileRecord> analytic_records(const ModelConfig& config, const std::vector<double>& sizes,
                                            const std::vector<Metric>& metrics, Mode mode);

}  // namespace attnprof
