// Acceptance runner: one PASS/FAIL line per criterion. Exit status is the
// number of failing criteria.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "attnprof/analysis/analysis.hpp"
#include "attnprof/costmodel/costmodel.hpp"
#include "attnprof/harness/harness.hpp"
#include "attnprof/instrument/clock.hpp"
#include "attnprof/instrument/profile.hpp"
#include "attnprof/modelzoo/attention.hpp"
#include "attnprof/modelzoo/model.hpp"
#include "attnprof/modelzoo/presets.hpp"
#include "attnprof/workloads/workloads.hpp"
#include "gradcheck.hpp"
#include "ref_attention.hpp"
#include "test_util.hpp"
#include "xml_lite.hpp"

using namespace attnprof;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

constexpr std::int64_t kMs = 1'000'000;

double rel(double got, double want) { return std::abs(got - want) / want; }

std::string mega(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2fM", v / 1e6);
  return buf;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Clock that returns a scripted duration for each start/stop pair.
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

// 1 -------------------------------------------------------------------------

void params(Verdict& v) {
  auto kinds = [](const char* name) {
    EncoderModel model(preset_config(name, Preset::Paper), false, 0);
    const auto report = param_report(model);
    std::map<TagKind, double> out;
    for (const auto& [kind, cost] : report.by_kind()) out[kind] = static_cast<double>(cost.params);
    double total = 0;
    for (const auto& [kind, n] : out) total += n;
    return std::make_pair(out, total);
  };
  auto check = [&](const std::string& label, double got, double want, double tol) {
    v.detail << " " << label << "=" << mega(got);
    v.require(rel(got, want) <= tol, label + " " + mega(got) + " vs " + mega(want));
  };

  {
    const auto [k, total] = kinds("text-full");
    check("bert.emb", k.at(TagKind::InputEmbedding), 23.8e6, 0.03);
    check("bert.sa", k.at(TagKind::SelfAttention), 29e6, 0.03);
    check("bert.interm", k.at(TagKind::Intermediate), 28.3e6, 0.03);
    check("bert.out", k.at(TagKind::Output), 28.3e6, 0.03);
    check("bert.total", total, 109e6, 0.01);
  }
  {
    const auto [k, total] = kinds("speech-full");
    check("hubert.emb", k.at(TagKind::InputEmbedding), 4.2e6, 0.05);
    check("hubert.pos", k.at(TagKind::PositionalEmbedding), 5.1e6, 0.05);
  }
  {
    const auto [k, total] = kinds("vision-full");
    check("vit.emb", k.at(TagKind::InputEmbedding), 0.6e6, 0.05);
  }
  {
    const auto [k, total] = kinds("text-sliding");
    check("longformer.total", total, 148e6, 0.02);
  }
}

// 2 -------------------------------------------------------------------------

void grids(Verdict& v) {
  std::vector<std::int64_t> text, speech;
  std::vector<double> vision;
  for (std::int64_t t = 62; t <= 3362; t += 60) text.push_back(t);
  for (std::int64_t t = 50; t <= 2500; t += 25) speech.push_back(t);
  for (int d = 32; d <= 1024; d += 32) vision.push_back(d);

  std::vector<std::int64_t> text_tokens;
  for (std::int64_t r : text_repeats()) text_tokens.push_back(text_tokens_for_repeats(r));
  std::vector<std::int64_t> speech_tokens;
  for (double s : speech_grid().points) speech_tokens.push_back(nominal_speech_tokens(s));

  v.require(text_grid().tokens == text, "text grid tokens");
  v.require(text_tokens == text, "text tokens from repeats");
  v.require(speech_grid().tokens == speech, "speech grid tokens");
  v.require(speech_tokens == speech, "speech nominal tokens");
  v.require(vision_grid().points == vision, "vision grid dims");
  v.detail << " text " << text_grid().tokens.size() << " pts " << text.front() << ".." << text.back() << ", speech "
           << speech.size() << " pts " << speech.front() << ".." << speech.back() << ", vision " << vision.size()
           << " pts " << vision.front() << ".." << vision.back();
}

// 3 -------------------------------------------------------------------------

void oracles(Verdict& v) {
  using testutil::random_tensor;
  using testutil::to_double;

  double sliding_err = 0;
  for (std::int64_t n : {1, 2, 7, 16, 33, 50, 64})
    for (std::int64_t window : {2, 4, 8, 16, 32, 128}) {
      auto q = random_tensor({n, 16}, 10 + n), k = random_tensor({n, 16}, 20 + n), val = random_tensor({n, 16}, 30 + n);
      auto out = attn::sliding_window_attention(q, k, val, window);
      const std::int64_t r = window / 2;
      auto ref = testutil::ref_masked_attention(to_double(q), to_double(k), to_double(val), n, 16,
                                                [r](std::int64_t i, std::int64_t j) { return std::abs(i - j) <= r; });
      sliding_err = std::max(sliding_err, testutil::max_abs_diff(out, ref));
    }
  v.detail << " sliding max|diff|=" << sliding_err;
  v.require(sliding_err <= 1e-5, "sliding vs band-masked full");

  double swin_err = 0;
  for (std::int64_t w : {2, 4, 7}) {
    const std::int64_t d = 8;
    auto q = random_tensor({w, w, d}, 16 + w), k = random_tensor({w, w, d}, 17 + w), val = random_tensor({w, w, d}, 18 + w);
    auto out = attn::shifted_window_attention_2d(q, k, val, w, false);
    auto ref = testutil::ref_full_attention(to_double(q), to_double(k), to_double(val), w * w, d);
    swin_err = std::max(swin_err, testutil::max_abs_diff(out, ref));
  }
  v.detail << " single-window max|diff|=" << swin_err;
  v.require(swin_err <= 1e-5, "single window vs full");

  int increases = 0;
  for (std::uint32_t seed = 1; seed <= 5; ++seed) {
    const std::int64_t n = 256, dh = 32;
    auto q = random_tensor({n, dh}, seed * 3, 0.5f), k = random_tensor({n, dh}, seed * 3 + 1, 0.5f),
         val = random_tensor({n, dh}, seed * 3 + 2);
    const auto full = to_double(attn::full_attention(q, k, val));
    double previous = INFINITY;
    for (std::int64_t m = 8; m <= n; m *= 2) {
      const double err = testutil::rel_error(to_double(attn::nystrom_attention(q, k, val, m, 6)), full);
      if (err > previous) ++increases;
      previous = err;
    }
  }
  v.detail << " nystrom increases=" << increases << "/30";
  v.require(increases == 0, "nystrom error nonincreasing in m");
}

// 4 -------------------------------------------------------------------------

void gradients(Verdict& v) {
  double worst = 0;
  std::string worst_name;
  for (const auto& check : testutil::kernel_gradchecks()) {
    for (std::uint32_t seed = 1; seed <= 5; ++seed) {
      const double err = check.run(seed);
      if (err > worst) {
        worst = err;
        worst_name = check.name;
      }
      v.require(err < 1e-4, check.name + " seed " + std::to_string(seed));
    }
  }
  v.detail << " " << testutil::kernel_gradchecks().size() << " kernels x 5 seeds, worst " << worst << " ("
           << worst_name << ")";
}

// 5 -------------------------------------------------------------------------

void scaling(Verdict& v) {
  const auto full = preset_config("text-full", Preset::Desk);
  const auto sliding = preset_config("text-sliding", Preset::Desk);
  const auto grid = text_grid();
  const std::vector<double> top(grid.points.begin() + static_cast<std::ptrdiff_t>(grid.points.size() / 2),
                                grid.points.end());

  HarnessOptions o;
  o.protocol = {3, 2};
  auto latencies = [&](const ModelConfig& c) {
    EncoderModel model(c, false, 0);
    std::vector<double> ms;
    for (double size : top) ms.push_back(measure_latency(model, make_workload(c, size, 0), Mode::Inference, o).value);
    return ms;
  };
  const double slope_full = loglog_slope(top, latencies(full));
  const double slope_sliding = loglog_slope(top, latencies(sliding));
  v.detail << " slope full=" << slope_full << " sliding=" << slope_sliding;
  v.require(slope_full >= 1.5, "full slope >= 1.5");
  v.require(slope_sliding <= 1.25, "sliding slope <= 1.25");

  SweepResult memory;
  for (const auto* c : {&full, &sliding}) {
    EncoderModel model(*c, false, 0);
    for (double size : grid.points)
      memory.records.push_back(measure_max_memory(model, make_workload(*c, size, 0), Mode::Inference, HarnessOptions{}));
  }
  const auto empirical = tipping_point(find_curve(memory, "text-full", Metric::MaxMemoryBytes),
                                       find_curve(memory, "text-sliding", Metric::MaxMemoryBytes),
                                       Direction::LowerIsBetter);
  const auto analytic_bytes = predict_tipping_point(full, sliding, CostMetric::Bytes, grid.tokens);
  const auto analytic_flops = predict_tipping_point(full, sliding, CostMetric::Flops, grid.tokens);
  auto show = [](auto x) { return x ? std::to_string(static_cast<std::int64_t>(*x)) : std::string("none"); };
  v.detail << "; memory tipping empirical=" << show(empirical) << " analytic bytes=" << show(analytic_bytes)
           << " analytic flops=" << show(analytic_flops);
  v.require(empirical.has_value(), "empirical memory tipping point");
  v.require(analytic_bytes.has_value() && analytic_flops.has_value(), "analytic tipping points");
  if (empirical && analytic_flops) v.require(*empirical >= static_cast<double>(*analytic_flops), "empirical >= flops");
}

// 6 -------------------------------------------------------------------------

void protocol(Verdict& v) {
  std::vector<std::int64_t> durations;
  for (int i = 0; i < 20; ++i) durations.push_back(i < 10 ? (900 + 37 * i) * kMs : (3 + i % 4) * kMs + 17 * i);
  double oracle = 0;
  for (int i = 10; i < 20; ++i) oracle += static_cast<double>(durations[i]) / 1e6;
  oracle /= 10;

  auto c = preset_config("text-full", Preset::Desk);
  c.n_layers = 1;
  EncoderModel model(c, false, 0);
  ScriptedClock clock(durations);
  HarnessOptions o;
  o.clock = &clock;
  const double got = measure_latency(model, make_workload(c, 62, 0), Mode::Inference, o).value;
  v.detail << " latency " << got << " ms (oracle " << oracle << ")";
  v.require(got == oracle, "mean of iterations 11-20");

  const std::int64_t budget = 45000, resident = 1000, per_example = 100;
  const MemoryProbe probe = [&](std::int64_t b) {
    if (b == 0) return resident;
    return resident + per_example * b + b * (b - 1) * (b - 2) / 8000;
  };
  const std::int64_t m1 = probe(1), m2 = probe(2);
  const std::int64_t bsz0 = (budget - resident) / (m2 - m1);
  std::vector<std::int64_t> trials{bsz0};
  while (probe(trials.back()) > budget) trials.push_back(static_cast<std::int64_t>(std::floor(0.9 * trials.back())));

  const auto est = estimate_max_batch(probe, budget);
  v.detail << "; estimator bsz0=" << est.initial_batch << " trials=";
  for (auto t : est.trials) v.detail << t << (t == est.trials.back() ? "" : ",");
  v.require(est.initial_batch == bsz0, "bsz0");
  v.require(est.trials == trials && est.batch == trials.back(), "0.9 shrink trials");
}

// 7 -------------------------------------------------------------------------

void layerwise(Verdict& v) {
  auto c = preset_config("text-full", Preset::Desk);
  c.n_layers = 2;
  EncoderModel model(c, false, 0);
  FakeClock clock(0, 1000);
  HarnessOptions o;
  o.clock = &clock;
  o.layerwise = true;
  const auto r = measure_latency(model, make_workload(c, 62, 0), Mode::Inference, o);
  std::int64_t sum_ns = 0;
  for (const auto& [tag, ms] : r.breakdown) sum_ns += std::llround(ms * 1e6);
  const std::int64_t total_ns = std::llround(r.value * 1e6);
  v.detail << " fake-clock tags sum " << sum_ns << " ns, total " << total_ns << " ns";
  v.require(sum_ns == total_ns, "per-tag + residual == total");

  const auto bert = preset_config("text-full", Preset::Paper);
  const auto kinds = shares_by_kind(layerwise_breakdown(analytic_records(bert, {1000}, {Metric::Flops}, Mode::Inference)).front());
  const double share = 1.0 - kinds.at(TagKind::SelfAttention);
  // Matmul-only closed form per layer: SA = 4nd^2 + 2n^2d, feed-forward = 2nd*ff.
  const double n = 1000, d = static_cast<double>(bert.d_model), ff = static_cast<double>(bert.d_ff);
  const double sa = 4 * n * d * d + 2 * n * n * d, mlp = 2 * n * d * ff;
  const double closed = mlp / (sa + mlp);
  v.detail << "; non-SA flop share at n=1000: " << share << " (matmul closed form " << closed << ")";
  v.require(share > 1.0 / 3.0, "non-SA share > 1/3");
  v.require(closed > 1.0 / 3.0, "closed-form share > 1/3");
}

// 8 -------------------------------------------------------------------------

void padding(Verdict& v) {
  const auto sliding = preset_config("text-sliding", Preset::Desk);
  const auto swin = preset_config("vision-swin", Preset::Desk);
  const auto text_pad = pad_input(100, sliding.pad_multiple.value_or(1));
  const auto vision_pad = pad_input(100, swin.pad_multiple.value_or(1));
  v.detail << " 100->" << text_pad << " (text sliding), 100->" << vision_pad << " (vision swin)";
  v.require(text_pad == 512, "text 100 -> 512");
  v.require(vision_pad == 224, "vision 100 -> 224");
  v.require(tokens_for(sliding, 100) == 512, "sliding model sees 512 tokens");

  auto unpadded = sliding;
  unpadded.pad_multiple.reset();
  const auto short_cost = flops_of(sliding, 100);
  const auto long_cost = flops_of(unpadded, 512);
  const auto raw_cost = flops_of(unpadded, 100);
  v.detail << "; flops(100 padded)=" << short_cost.total().flops() << " flops(512 unpadded)=" << long_cost.total().flops()
           << " flops(100 unpadded)=" << raw_cost.total().flops();
  v.require(short_cost.total().flops() >= long_cost.total().flops(), "flops(100) >= flops(512)");
  v.require(short_cost.peak_bytes >= long_cost.peak_bytes, "bytes(100) >= bytes(512)");
}

// 9 -------------------------------------------------------------------------

void report(Verdict& v, const fs::path& work) {
  fs::remove_all(work);
  HarnessOptions o;
  o.protocol = {2, 1};

  SweepPlan text;
  text.models = {preset_config("text-full", Preset::Desk), preset_config("text-sliding", Preset::Desk)};
  text.grid = {62, 242, 602};
  text.metrics = {Metric::LatencyMs, Metric::Flops};
  SweepPlan speech;
  speech.models = {preset_config("speech-full", Preset::Desk), preset_config("speech-sliding", Preset::Desk)};
  speech.grid = {1, 2, 4};
  speech.metrics = {Metric::Flops};

  std::set<std::string> markers;
  std::size_t charts = 0, layer_charts = 0;
  for (const auto& [name, plan] : {std::pair{"text", text}, std::pair{"speech", speech}}) {
    const auto sweep_json = (work / name / "sweep.json").string();
    fs::create_directories(work / name);
    run_sweep(plan, o, {sweep_json, ""});
    const auto loaded = load_sweep(sweep_json);
    const auto a = emit_report(loaded, typical_lengths(), {(work / name / "a").string(), {}});
    const auto b = emit_report(load_sweep(sweep_json), typical_lengths(), {(work / name / "b").string(), {}});
    charts += a.charts.size();
    layer_charts += a.layerwise_charts.size();

    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(work / name / "a")) {
      ++files;
      const auto other = work / name / "b" / e.path().filename();
      v.require(fs::exists(other) && slurp(e.path()) == slurp(other), "byte-identical " + e.path().filename().string());
    }
    v.require(files > 0, "report files");

    for (const auto& chart : a.charts) {
      std::unique_ptr<xml_lite::Element> doc;
      try {
        doc = xml_lite::parse(slurp(chart));
      } catch (const std::exception& e) {
        v.require(false, chart + ": " + e.what());
        continue;
      }
      std::size_t series = 0;
      for (const auto* p : doc->all("polyline")) series += p->attr("class") == "series";
      v.require(doc->name == "svg" && series == 2, "two series in " + fs::path(chart).filename().string());
      for (const auto* l : doc->all("line"))
        if (l->attr("class") == "marker") markers.insert(l->attr("data-dataset") + "=" + l->attr("data-x"));
    }
    for (const auto& chart : a.layerwise_charts) {
      try {
        xml_lite::parse(slurp(chart));
      } catch (const std::exception& e) {
        v.require(false, chart + ": " + e.what());
      }
    }
  }
  for (const auto& t : typical_lengths())
    v.require(markers.count(t.dataset + "=" + std::to_string(t.tokens)) == 1, "marker " + t.dataset);
  v.detail << " " << charts << " line charts, " << layer_charts << " layerwise charts, " << markers.size()
           << " markers (Librispeech=" << markers.count("Librispeech=615") << ", TriviaQA=" << markers.count("TriviaQA=6589")
           << ")";
  fs::remove_all(work);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "attnprof_acceptance").string();
  app.add_option("--only", only, "criteria to run (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--work-dir", work, "scratch directory for report output");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria = {
      {"parameter counts", params},
      {"grid fidelity", grids},
      {"oracle equivalence", oracles},
      {"gradient checks", gradients},
      {"scaling exponents and memory tipping point", scaling},
      {"protocol fidelity", protocol},
      {"layerwise consistency", layerwise},
      {"padding rules", padding},
      {"report emission", [&](Verdict& v) { report(v, work); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      criteria[i].second(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !v.pass;
    std::printf("%s %d %s:%s (%.1fs)\n", v.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), v.detail.str().c_str(),
                secs);
    std::fflush(stdout);
  }
  return failed;
}
