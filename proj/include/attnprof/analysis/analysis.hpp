#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attnprof/layer_tag.hpp"
#include "attnprof/schema/records.hpp"
#include "attnprof/workloads/workloads.hpp"

namespace attnprof {

struct Curve {
  std::string model;
  std::string preset;
  Modality modality = Modality::Text;
  Mode mode = Mode::Inference;
  Metric metric = Metric::LatencyMs;
  Source source = Source::Empirical;
  std::vector<double> sizes;  // strictly increasing
  std::vector<double> values;
};

// Throws ConfigError when sizes are not strictly increasing or lengths differ.
void validate(const Curve& curve);

enum class Direction { LowerIsBetter, HigherIsBetter };

Direction direction_of(Metric metric);

struct TippingOptions {
  // Centered moving-average window applied to both curves; 1 disables it.
  int smoothing_window = 1;
};

// Smallest size where `efficient` is strictly better than `vanilla` and stays
// strictly better at every later size. Throws DimensionError when the grids
// differ.
std::optional<double> tipping_point(const Curve& vanilla, const Curve& efficient, Direction direction,
                                    const TippingOptions& options = {});

// One curve per (model, preset, mode, metric, source), repeats averaged,
// error records dropped. Ordered by those fields.
std::vector<Curve> curves_from(const SweepResult& sweep);

// Throws LookupError when no such curve exists.
Curve find_curve(const SweepResult& sweep, const std::string& model, Metric metric,
                 std::optional<Source> source = std::nullopt, std::optional<Mode> mode = std::nullopt);

struct LayerShares {
  double size = 0.0;
  double total = 0.0;
  // Fraction of `total` per tag; the part no tag covers is added to Other[0].
  std::map<LayerTag, double> shares;
};

// Shares per input size, in size order. Repeats are averaged. Throws
// ConfigError when a record has no breakdown or records mix models/metrics.
std::vector<LayerShares> layerwise_breakdown(const std::vector<ProfileRecord>& records);

// Shares summed per TagKind.
std::map<TagKind, double> shares_by_kind(const LayerShares& shares);

// True for archetype names whose attention is the efficient variant; nullopt
// for names that are not archetypes.
std::optional<bool> is_efficient_model(const std::string& model);

struct TippingResult {
  std::string vanilla;
  std::string efficient;
  Modality modality = Modality::Text;
  Mode mode = Mode::Inference;
  Metric metric = Metric::LatencyMs;
  Source source = Source::Empirical;
  std::optional<double> size;
  std::optional<std::string> error;  // e.g. grid mismatch
};

// Every vanilla/efficient pair of the same modality, mode, metric and source.
std::vector<TippingResult> all_tipping_points(const SweepResult& sweep, const TippingOptions& options = {});

std::string format_tipping(const TippingResult& t);

struct ReportOptions {
  std::string out_dir;
  TippingOptions tipping;
};

struct ReportFiles {
  std::vector<std::string> charts;            // line charts
  std::vector<std::string> layerwise_charts;  // stacked-area charts
  std::vector<std::string> tables;            // csv
  std::string summary;                        // summary.txt
};

// Writes line charts per (modality, mode, metric, source) with one series per
// model and a vertical marker per typical length of that modality, stacked
// layerwise charts for every curve with breakdowns, CSV tables and
// summary.txt. Output is a pure function of the inputs. Throws ConfigError on
// an empty sweep.
ReportFiles emit_report(const SweepResult& sweep, const std::vector<TypicalLength>& typical,
                        const ReportOptions& options);

// X coordinate used by charts: nominal tokens for text and speech, pixels for vision.
double chart_x(Modality modality, double size);

}  // namespace attnprof
