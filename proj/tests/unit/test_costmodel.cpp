#include <doctest.h>

#include <cmath>

#include "attnprof/costmodel/costmodel.hpp"
#include "attnprof/errors.hpp"
#include "attnprof/modelzoo/model.hpp"
#include "attnprof/modelzoo/presets.hpp"
#include "attnprof/numkernel/counters.hpp"
#include "attnprof/numkernel/memory.hpp"
#include "attnprof/workloads/workloads.hpp"

using namespace attnprof;

namespace {

struct Measured {
  std::map<LayerTag, nk::OpTally> ops;
  std::int64_t peak_delta = 0;
  std::map<LayerTag, std::int64_t> tag_peaks;
};

// Counting oracle and accountant readings for one inference forward.
Measured measure(const EncoderModel& model, const ModelInput& input, std::int64_t batch = 1) {
  Measured m;
  const auto before = nk::accountant().per_tag_current();
  nk::MemoryScope scope;
  {
    nk::CountingScope counting;
    model.forward(input, batch);
    m.ops = counting.per_tag();
  }
  m.peak_delta = static_cast<std::int64_t>(scope.peak_delta_bytes());
  for (const auto& [tag, peak] : scope.per_tag_peak()) {
    const auto it = before.find(tag);
    const std::int64_t base = it == before.end() ? 0 : static_cast<std::int64_t>(it->second);
    if (static_cast<std::int64_t>(peak) > base) m.tag_peaks[tag] = static_cast<std::int64_t>(peak) - base;
  }
  return m;
}

std::int64_t input_bytes(const ModelInput& in) {
  if (const auto* w = std::get_if<WaveformInput>(&in)) return w->samples.bytes();
  if (const auto* i = std::get_if<ImageInput>(&in)) return i->pixels.bytes();
  return 0;
}

void check_against_oracle(const ModelConfig& c, double point, std::int64_t batch = 1) {
  CAPTURE(c.name);
  CAPTURE(point);
  CAPTURE(batch);
  const EncoderModel model(c, false, 1);
  const ModelInput input = make_input(c, point, 5);
  const Measured m = measure(model, input, batch);
  const CostBreakdown cost = flops_of(c, model_units(c, point), Mode::Inference, {batch, false});

  std::map<LayerTag, nk::OpTally> predicted;
  for (const auto& [tag, tc] : cost.per_tag)
    if (tc.macs != 0 || tc.elementwise != 0) predicted[tag] = {tc.macs, tc.elementwise};
  CHECK(predicted == m.ops);

  std::int64_t activation_peak = cost.peak_bytes - model.parameter_bytes() - input_bytes(input);
  CHECK(activation_peak == m.peak_delta);
  std::map<LayerTag, std::int64_t> tag_bytes;
  for (const auto& [tag, tc] : cost.per_tag)
    if (tc.bytes != 0) tag_bytes[tag] = tc.bytes;
  CHECK(tag_bytes == m.tag_peaks);
  if (tag_bytes != m.tag_peaks) {
    for (const auto& [tag, v] : m.tag_peaks) {
      const auto it = tag_bytes.find(tag);
      const std::int64_t p = it == tag_bytes.end() ? 0 : it->second;
      if (p != v) MESSAGE(to_string(tag) << " predicted " << p << " measured " << v);
    }
    for (const auto& [tag, v] : tag_bytes)
      if (!m.tag_peaks.count(tag)) MESSAGE(to_string(tag) << " predicted " << v << " measured 0");
  }
}

}  // namespace

TEST_CASE("op tallies and activation bytes match the oracles on desk dims") {
  for (const auto& a : archetypes()) {
    const ModelConfig c = preset_config(a.family, Preset::Desk);
    switch (c.modality()) {
      case Modality::Text:
        for (double n : {1.0, 7.0, 33.0, 64.0}) check_against_oracle(c, n);
        break;
      case Modality::Speech:
        for (double sec : {0.05, 0.3, 1.3}) check_against_oracle(c, sec);
        break;
      case Modality::Vision:
        for (double px : {16.0, 40.0, 64.0}) check_against_oracle(c, px);
        break;
    }
  }
}

TEST_CASE("batched tallies match the oracle") {
  for (Family f : {Family::TextFull, Family::TextSlidingWindow, Family::SpeechFull, Family::VisionShiftedWindow}) {
    ModelConfig c = preset_config(f, Preset::Desk);
    if (f != Family::VisionShiftedWindow) c.n_layers = 1;
    check_against_oracle(c, c.modality() == Modality::Speech ? 0.2 : 32.0, 3);
  }
}

TEST_CASE("small single-head config matches the MAC oracle exactly") {
  ModelConfig c = preset_config(Family::TextFull, Preset::Desk);
  c.d_model = 8;
  c.n_heads = 1;
  c.n_layers = 1;
  c.d_ff = 32;
  c.vocab_size = 20;
  c.max_positions = 8;
  check_against_oracle(c, 4.0);
  const CostBreakdown cost = flops_of(c, 4);
  const std::int64_t n = 4, d = 8;
  // q, k, v, o projections plus scores and context.
  CHECK(cost.get({TagKind::SelfAttention, 0}).macs == 4 * n * d * d + 2 * n * n * d);
}

TEST_CASE("empty input gives an all-zero breakdown") {
  const ModelConfig c = preset_config("text-full", Preset::Paper);
  const CostBreakdown cost = flops_of(c, 0);
  CHECK(cost.per_tag.empty());
  CHECK(cost.peak_bytes == 0);
  const ModelConfig speech = preset_config("speech-full", Preset::Desk);
  CHECK(flops_of(speech, 100).per_tag.empty());
}

TEST_CASE("full-attention score term quadruples when the length doubles") {
  ModelConfig c = preset_config("text-full", Preset::Paper);
  c.max_positions = 8192;
  const auto sa = [&](std::int64_t n) { return flops_of(c, n).get({TagKind::SelfAttention, 0}).macs; };
  const std::int64_t d = c.d_model, n = 512;
  const std::int64_t score_n = sa(n) - 4 * n * d * d, score_2n = sa(2 * n) - 4 * 2 * n * d * d;
  CHECK(score_2n == 4 * score_n);
}

TEST_CASE("per-layer closed forms") {
  const ModelConfig c = preset_config("text-full", Preset::Paper);
  const std::int64_t n = 300, d = c.d_model;
  const CostBreakdown cost = flops_of(c, n);
  const TagCost sa = cost.of_kind(TagKind::SelfAttention);
  const std::int64_t heads = c.n_heads;
  CHECK(sa.macs == c.n_layers * (4 * n * d * d + 2 * n * n * d));
  CHECK(sa.elementwise == c.n_layers * 5 * heads * n * n);
  CHECK(cost.of_kind(TagKind::Intermediate).flops() + cost.of_kind(TagKind::Output).flops() ==
        c.n_layers * 16 * n * d * d);

  const ModelConfig sw = preset_config("text-sliding", Preset::Paper);
  const std::int64_t n2 = 4096, w = *sw.attention_window;
  const TagCost sa2 = flops_of(sw, n2).get({TagKind::SelfAttention, 0});
  // Interior rows see exactly w + 1 keys; edges see fewer, globals add projections.
  const std::int64_t proj = 4 * n2 * d * d;
  CHECK(sa2.macs - proj < 2 * n2 * (w + 1 + sw.global_tokens) * d + 2 * sw.global_tokens * n2 * d + 3 * n2 * d * d);
  CHECK(sa2.macs - proj > 2 * (n2 - w) * (w + 1) * d);
}

TEST_CASE("training ops are three times inference") {
  for (const auto& a : archetypes()) {
    const ModelConfig c = preset_config(a.family, Preset::Desk);
    const std::int64_t size = model_units(c, c.modality() == Modality::Speech ? 2.0 : 128.0);
    const CostBreakdown inf = flops_of(c, size, Mode::Inference, {1, true});
    const CostBreakdown tr = flops_of(c, size, Mode::Training, {1, true});
    CHECK(tr.total().flops() == 3 * inf.total().flops());
    CHECK(tr.peak_bytes > inf.peak_bytes);
    CHECK(tr.total().params == inf.total().params);
  }
}

TEST_CASE("additivity over layers") {
  const ModelConfig c = preset_config("text-nystrom", Preset::Desk);
  const CostBreakdown cost = flops_of(c, 400);
  TagCost sum;
  for (const auto& [tag, tc] : cost.per_tag) sum += tc;
  CHECK(sum == cost.total());
  const auto kinds = cost.by_kind();
  std::int64_t flops = 0;
  for (const auto& [k, tc] : kinds) flops += tc.flops();
  CHECK(flops == cost.total().flops());
}

TEST_CASE("non-SA share at typical and extreme lengths") {
  ModelConfig bert = preset_config("text-full", Preset::Paper);
  CHECK(non_sa_share(bert, 1000, CostMetric::Flops) > 0.5);
  bert.max_positions = 1'000'000;
  CHECK(non_sa_share(bert, 1'000'000, CostMetric::Flops) < 0.2);

  ModelConfig bare = preset_config("text-full", Preset::Desk);
  bare.n_layers = 1;
  bare.d_ff = 0;
  bare.pooler = false;
  const CostBreakdown cost = flops_of(bare, 512);
  const double encoder_non_sa =
      static_cast<double>(cost.get({TagKind::Intermediate, 0}).flops() + cost.get({TagKind::Output, 0}).flops());
  CHECK(encoder_non_sa == 0.0);
}

TEST_CASE("log-log slopes over the top decade") {
  ModelConfig full = preset_config("text-full", Preset::Paper);
  full.max_positions = 1 << 20;
  ModelConfig sliding = preset_config("text-sliding", Preset::Paper);
  sliding.max_positions = 1 << 20;
  std::vector<double> xs, yf, ys;
  for (std::int64_t n = 100'000; n <= 1'000'000; n += 100'000) {
    xs.push_back(static_cast<double>(n));
    // attention core only: SA flops minus the linear projections
    yf.push_back(static_cast<double>(self_attention_flops(flops_of(full, n))));
    ys.push_back(static_cast<double>(self_attention_flops(flops_of(sliding, n))));
  }
  CHECK(loglog_slope(xs, yf) == doctest::Approx(2.0).epsilon(0.025));
  CHECK(loglog_slope(xs, ys) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("predicted tipping points") {
  const ModelConfig full = preset_config("text-full", Preset::Desk);
  const ModelConfig sliding = preset_config("text-sliding", Preset::Desk);
  std::vector<std::int64_t> grid;
  for (double p : text_grid().points) grid.push_back(static_cast<std::int64_t>(p));
  ModelConfig full_long = full;
  full_long.max_positions = 4096;
  const auto flops_point = predict_tipping_point(full_long, sliding, CostMetric::Flops, grid);
  REQUIRE(flops_point);
  CHECK(*flops_point > 512);
  const auto bytes_point = predict_tipping_point(full_long, sliding, CostMetric::Bytes, grid);
  REQUIRE(bytes_point);
  CHECK(*bytes_point > 512);

  CHECK_FALSE(predict_tipping_point(full_long, full_long, CostMetric::Flops, grid));
  ModelConfig worse = full_long;
  worse.d_ff *= 2;
  CHECK_FALSE(predict_tipping_point(full_long, worse, CostMetric::Flops, grid));
  CHECK_THROWS_AS(predict_tipping_point(full, preset_config("speech-full", Preset::Desk), CostMetric::Flops, grid),
                  ConfigError);
}

TEST_CASE("sustained crossing ignores transient dips") {
  CHECK(sustained_crossing({5, 10, 20}, {7, 9, 12}) == std::optional<std::size_t>(1));
  CHECK(sustained_crossing({5, 10, 20, 30}, {4, 11, 12, 13}) == std::optional<std::size_t>(2));
  CHECK_FALSE(sustained_crossing({5, 10}, {5, 10}));
  CHECK_FALSE(sustained_crossing({5, 10}, {4, 11}));
}

TEST_CASE("analytic records carry the analytic source") {
  const ModelConfig c = preset_config("vision-full", Preset::Desk);
  const auto records = analytic_records(c, {32, 64}, {Metric::Flops, Metric::LatencyMs, Metric::ParamCount,
                                                      Metric::MaxMemoryBytes},
                                        Mode::Inference);
  REQUIRE(records.size() == 6);
  for (const auto& r : records) {
    CHECK(r.source == Source::Analytic);
    CHECK(r.value > 0.0);
    double sum = 0.0;
    for (const auto& [tag, v] : r.breakdown) sum += v;
    if (r.metric != Metric::MaxMemoryBytes) CHECK(sum == doctest::Approx(r.value));
  }
  CHECK(records[0].tokens == 5);
  CHECK(records[1].value == static_cast<double>(count_params(c).total()));
}
