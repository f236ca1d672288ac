// attnprof: profile encoder archetypes, run sweeps, predict costs and render reports.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "attnprof/analysis/analysis.hpp"
#include "attnprof/costmodel/costmodel.hpp"
#include "attnprof/errors.hpp"
#include "attnprof/harness/harness.hpp"
#include "attnprof/instrument/timer_tree.hpp"
#include "attnprof/modelzoo/presets.hpp"
#include "attnprof/numkernel/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace attnprof;

namespace {

constexpr int kOk = 0, kMeasurementError = 1, kUsageError = 2;

// Raised for bad names and flag values; maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Args {
  std::vector<std::string> models;
  std::string grid;
  std::vector<std::string> metrics;
  std::string mode = "inference";
  std::string preset = "desk";
  std::int64_t budget_bytes = kDefaultBudgetBytes;
  int threads = 1;
  std::uint64_t seed = 0;
  int repeats = 1;
  std::string out = "attnprof-out";
  std::string in;
  std::string source = "empirical";
  std::string vanilla, efficient;
  int smoothing = 1;
  int iters = 20, reported = 10;
};

std::string join(const std::vector<std::string>& v, const char* sep = ",") {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : sep) + x;
  return s;
}

std::vector<std::string> metric_names() {
  std::vector<std::string> out;
  for (Metric m : all_metrics()) out.emplace_back(metric_name(m));
  return out;
}

Metric metric_or_usage(const std::string& name) {
  if (const auto m = parse_metric(name)) return *m;
  std::string msg = "unknown metric '" + name + "'";
  auto pool = metric_names();
  pool.insert(pool.end(), {"latency", "throughput", "memory", "params"});
  const auto close = suggest_names(name, pool);
  if (!close.empty()) msg += "; did you mean " + close.front() + "?";
  throw UsageError(msg + " (known: " + join(metric_names(), ", ") + ")");
}

std::vector<Metric> metrics_of(const Args& a, std::vector<Metric> fallback) {
  if (a.metrics.empty()) return fallback;
  std::vector<Metric> out;
  for (const auto& m : a.metrics) out.push_back(metric_or_usage(m));
  return out;
}

Mode mode_of(const Args& a) {
  if (const auto m = parse_mode(a.mode)) return *m;
  throw UsageError("unknown mode '" + a.mode + "' (inference or training)");
}

Preset preset_of(const Args& a) {
  if (const auto p = parse_preset(a.preset)) return *p;
  throw UsageError("unknown preset '" + a.preset + "' (paper or desk)");
}

// Archetype names resolve through the preset; anything that exists on disk is
// read as a config file.
std::vector<ModelConfig> resolve_models(const Args& a) {
  if (a.models.empty()) throw UsageError("--models is required");
  std::vector<ModelConfig> out;
  for (const auto& name : a.models) {
    try {
      if (fs::is_regular_file(name)) {
        out.push_back(load_config_file(name));
      } else {
        out.push_back(preset_config(name, preset_of(a)));
      }
    } catch (const LookupError& e) {
      throw UsageError(e.what());
    } catch (const ConfigError& e) {
      throw UsageError(name + ": " + e.what());
    }
  }
  return out;
}

std::vector<double> grid_of(const Args& a) {
  if (a.grid.empty()) return {};
  try {
    return parse_grid_spec(a.grid);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

int resolved_threads(const Args& a) {
  if (const char* env = std::getenv("ATTNPROF_THREADS"); env && *env) {
    try {
      const int t = std::stoi(env);
      if (t >= 1) return t;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("ATTNPROF_THREADS must be a positive integer, got '") + env + "'");
  }
  if (a.threads < 1) throw UsageError("--threads must be >= 1");
  return a.threads;
}

HarnessOptions harness_options(const Args& a, bool calibrate) {
  HarnessOptions o;
  o.protocol = {a.iters, a.reported};
  try {
    validate(o.protocol);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  o.budget_bytes = a.budget_bytes;
  o.threads = resolved_threads(a);
  o.seed = a.seed;
  nk::set_thread_count(o.threads);
  if (calibrate) o.timer_overhead_ns = calibrate_timer(SteadyClock::instance()).region_overhead_ns;
  return o;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const std::string& path) {
  if (path.empty() || path == "-") {
    std::stringstream ss;
    ss << std::cin.rdbuf();
    return ss.str();
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SweepResult read_sweep(const std::string& path) {
  try {
    return sweep_from_json(read_text(path));
  } catch (const ConfigError& e) {
    throw UsageError(std::string(path.empty() ? "stdin" : path) + ": " + e.what());
  }
}

// Resolved configuration plus an argv that replays the run from the saved
// model files alone.
void write_manifest(const std::string& command, const Args& a, const std::vector<ModelConfig>& models,
                    const HarnessOptions* options, const std::vector<std::string>& outputs) {
  const fs::path out(a.out);
  fs::create_directories(out);
  json m;
  m["tool"] = "attnprof";
  m["subcommand"] = command;
  json resolved = {{"grid", a.grid},
                   {"metrics", a.metrics},
                   {"mode", a.mode},
                   {"preset", a.preset},
                   {"budget_bytes", a.budget_bytes},
                   {"threads", options ? options->threads : a.threads},
                   {"seed", a.seed},
                   {"repeats", a.repeats},
                   {"iters", a.iters},
                   {"reported_iters", a.reported},
                   {"out", a.out},
                   {"in", a.in},
                   {"source", a.source},
                   {"smoothing", a.smoothing}};
  if (options) resolved["timer_overhead_ns"] = options->timer_overhead_ns;
  m["resolved"] = resolved;

  std::vector<std::string> model_files;
  json configs = json::array();
  for (const auto& c : models) {
    const fs::path file = out / "models" / (c.name + ".cfg");
    write_text(file, to_config_text(c));
    model_files.push_back(file.string());
    configs.push_back({{"name", c.name}, {"file", file.string()}, {"config", to_config_text(c)}});
  }
  m["models"] = configs;

  const bool measures = command == "profile" || command == "sweep" || command == "layerwise";
  const bool reads = command == "tipping-point" || command == "report";
  std::vector<std::string> argv = {"attnprof", command};
  auto flag = [&](bool applies, const std::string& name, const std::string& value) {
    if (!applies || value.empty()) return;
    argv.push_back(name);
    argv.push_back(value);
  };
  flag(!reads, "--models", join(model_files));
  flag(!reads, "--grid", a.grid);
  flag(command != "report", "--metrics", join(a.metrics));
  flag(!reads, "--mode", a.mode);
  flag(!reads, "--preset", a.preset);
  flag(measures, "--budget-bytes", std::to_string(a.budget_bytes));
  flag(measures, "--threads", std::to_string(options ? options->threads : a.threads));
  flag(measures, "--seed", std::to_string(a.seed));
  flag(measures, "--repeats", std::to_string(a.repeats));
  flag(measures, "--iters", std::to_string(a.iters));
  flag(measures, "--reported-iters", std::to_string(a.reported));
  flag(command == "layerwise", "--source", a.source);
  flag(reads, "--in", a.in);
  flag(command == "tipping-point", "--vanilla", a.vanilla);
  flag(command == "tipping-point", "--efficient", a.efficient);
  flag(reads, "--smoothing", std::to_string(a.smoothing));
  flag(true, "--out", a.out);
  m["replay_argv"] = argv;
  m["outputs"] = outputs;
  write_text(out / "run.json", m.dump(2) + "\n");
}

void print_records(const SweepResult& sweep, std::ostream& os) {
  os << std::left << std::setw(16) << "model" << std::setw(8) << "size" << std::setw(8) << "tokens" << std::setw(24)
     << "metric" << std::setw(11) << "source" << "value\n";
  for (const auto& r : sweep.records) {
    os << std::setw(16) << r.model << std::setw(8) << format_number(r.size) << std::setw(8) << r.tokens
       << std::setw(24) << metric_name(r.metric) << std::setw(11) << source_name(r.source);
    if (r.error) os << "error: " << *r.error << "\n";
    else os << format_number(r.value) << (r.metric == Metric::ThroughputExPerSec ? " (batch " + std::to_string(r.meta.batch) + ")" : "") << "\n";
  }
}

int status_of(const SweepResult& sweep) {
  for (const auto& r : sweep.records)
    if (r.error) return kMeasurementError;
  return kOk;
}

void print_shares(const SweepResult& sweep, std::ostream& os) {
  for (const auto& c : curves_from(sweep)) {
    std::vector<ProfileRecord> records;
    for (const auto& r : sweep.records)
      if (!r.error && r.model == c.model && r.metric == c.metric && r.source == c.source && r.mode == c.mode)
        records.push_back(r);
    os << c.model << " " << metric_name(c.metric) << " (" << source_name(c.source) << ")\n";
    os << "  " << std::left << std::setw(10) << "size";
    for (TagKind k : kAllTagKinds) os << std::setw(21) << tag_kind_name(k);
    os << "\n";
    for (const auto& s : layerwise_breakdown(records)) {
      const auto kinds = shares_by_kind(s);
      os << "  " << std::setw(10) << format_number(s.size);
      for (TagKind k : kAllTagKinds) {
        const auto it = kinds.find(k);
        std::ostringstream v;
        v << std::fixed << std::setprecision(4) << (it == kinds.end() ? 0.0 : it->second);
        os << std::setw(21) << v.str();
      }
      os << "\n";
    }
  }
}

SweepResult analytic_sweep(const std::vector<ModelConfig>& models, const std::vector<double>& grid,
                           const std::vector<Metric>& metrics, Mode mode, const std::string& preset) {
  SweepResult sweep;
  for (const auto& c : models) {
    const auto points = grid.empty() ? default_grid(c.modality()).points : grid;
    for (auto& r : analytic_records(c, points, metrics, mode)) {
      if (!preset.empty()) r.preset = preset;
      sweep.records.push_back(std::move(r));
    }
  }
  return sweep;
}

int cmd_list_models() {
  for (const auto& a : archetypes()) {
    const auto c = preset_config(a.family, Preset::Paper);
    std::cout << std::left << std::setw(16) << a.name << std::setw(22) << a.description << std::setw(8)
              << modality_name(c.modality()) << family_name(a.family) << "\n";
  }
  return kOk;
}

int cmd_sweep(const Args& a, bool fresh, bool layerwise, const std::string& stem, std::vector<Metric> defaults) {
  const auto models = resolve_models(a);
  SweepPlan plan;
  plan.models = models;
  plan.grid = grid_of(a);
  plan.metrics = metrics_of(a, std::move(defaults));
  plan.mode = mode_of(a);
  plan.repeats = a.repeats;
  if (plan.repeats < 1) throw UsageError("--repeats must be >= 1");
  HarnessOptions o = harness_options(a, true);
  o.layerwise = layerwise;
  const fs::path out(a.out);
  fs::create_directories(out);
  const SweepOutput files{(out / (stem + ".json")).string(), (out / (stem + ".csv")).string()};
  if (fresh) {
    fs::remove(files.json_path);
    fs::remove(files.csv_path);
  }
  SweepProgress progress;
  const auto sweep = run_sweep(plan, o, files, &progress);
  std::cerr << "measured " << progress.measured << ", skipped " << progress.skipped << ", failed " << progress.failed
            << "\n";
  print_records(sweep, std::cout);
  std::vector<std::string> outputs = {files.json_path, files.csv_path};
  if (layerwise) {
    print_shares(sweep, std::cout);
    const auto report = emit_report(sweep, typical_lengths(), {(out / "report").string(), {}});
    outputs.insert(outputs.end(), report.layerwise_charts.begin(), report.layerwise_charts.end());
  }
  write_manifest(stem, a, models, &o, outputs);
  return status_of(sweep);
}

int cmd_layerwise(const Args& a) {
  if (a.source == "empirical") return cmd_sweep(a, true, true, "layerwise", {Metric::LatencyMs});
  if (a.source != "analytic") throw UsageError("--source must be empirical or analytic");
  const auto models = resolve_models(a);
  const auto sweep = analytic_sweep(models, grid_of(a), metrics_of(a, {Metric::Flops}), mode_of(a), "");
  const fs::path out(a.out);
  save_sweep(sweep, (out / "layerwise.json").string());
  write_text(out / "layerwise.csv", sweep_to_csv(sweep));
  print_shares(sweep, std::cout);
  const auto report = emit_report(sweep, typical_lengths(), {(out / "report").string(), {}});
  std::vector<std::string> outputs = {(out / "layerwise.json").string(), (out / "layerwise.csv").string()};
  outputs.insert(outputs.end(), report.layerwise_charts.begin(), report.layerwise_charts.end());
  write_manifest("layerwise", a, models, nullptr, outputs);
  return kOk;
}

int cmd_cost(const Args& a) {
  const auto models = resolve_models(a);
  const auto metrics = metrics_of(a, {Metric::Flops});
  for (Metric m : metrics) {
    if (m != Metric::Flops && m != Metric::MaxMemoryBytes && m != Metric::ParamCount) {
      throw UsageError("cost supports flops, max_memory_bytes and param_count, not " + std::string(metric_name(m)));
    }
  }
  const auto sweep = analytic_sweep(models, grid_of(a), metrics, mode_of(a), "");
  const fs::path out(a.out);
  save_sweep(sweep, (out / "cost.json").string());
  write_text(out / "cost.csv", sweep_to_csv(sweep));
  write_manifest("cost", a, models, nullptr, {(out / "cost.json").string(), (out / "cost.csv").string()});
  std::cout << sweep_to_json(sweep);
  return kOk;
}

int cmd_tipping_point(Args a) {
  const auto sweep = read_sweep(a.in);
  if (sweep.records.empty()) throw UsageError("no records on input");
  const fs::path out(a.out);
  if (a.in.empty() || a.in == "-") {
    a.in = (out / "tipping_input.json").string();
    save_sweep(sweep, a.in);
  }
  std::vector<std::string> lines;
  const TippingOptions opts{a.smoothing};
  if (!a.vanilla.empty() || !a.efficient.empty()) {
    if (a.vanilla.empty() || a.efficient.empty()) throw UsageError("--vanilla and --efficient go together");
    const Metric metric = a.metrics.empty() ? sweep.records.front().metric : metric_or_usage(a.metrics.front());
    Curve v, e;
    try {
      v = find_curve(sweep, a.vanilla, metric);
      e = find_curve(sweep, a.efficient, metric);
    } catch (const LookupError& ex) {
      throw UsageError(ex.what());
    }
    TippingResult t{v.model, e.model, v.modality, v.mode, metric, v.source, std::nullopt, std::nullopt};
    try {
      t.size = tipping_point(v, e, direction_of(metric), opts);
    } catch (const DimensionError& ex) {
      t.error = ex.what();
    }
    lines.push_back(format_tipping(t));
  } else {
    std::optional<Metric> only;
    if (!a.metrics.empty()) only = metric_or_usage(a.metrics.front());
    for (const auto& t : all_tipping_points(sweep, opts))
      if (!only || t.metric == *only) lines.push_back(format_tipping(t));
    if (lines.empty()) throw UsageError("no vanilla/efficient model pairs on input");
  }
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  std::cout << text;
  write_text(out / "tipping.txt", text);
  write_manifest("tipping-point", a, {}, nullptr, {(out / "tipping.txt").string()});
  return kOk;
}

int cmd_report(const Args& a) {
  if (a.in.empty()) throw UsageError("--in is required");
  const auto sweep = read_sweep(a.in);
  if (sweep.records.empty()) throw UsageError(a.in + ": the sweep has no records");
  const auto files = emit_report(sweep, typical_lengths(), {a.out, {a.smoothing}});
  std::vector<std::string> outputs = files.charts;
  outputs.insert(outputs.end(), files.layerwise_charts.begin(), files.layerwise_charts.end());
  outputs.insert(outputs.end(), files.tables.begin(), files.tables.end());
  outputs.push_back(files.summary);
  std::cout << read_text(files.summary);
  write_manifest("report", a, {}, nullptr, outputs);
  return kOk;
}

void add_common(CLI::App* sub, Args& a, bool measure) {
  sub->add_option("--models", a.models, "Archetype names or config files, comma separated")->delimiter(',');
  sub->add_option("--grid", a.grid, "Sizes as start:stop:step (inclusive) or one value; default per modality");
  sub->add_option("--metrics,--metric", a.metrics, "Metrics, comma separated")->delimiter(',');
  sub->add_option("--mode", a.mode, "inference or training")->capture_default_str();
  sub->add_option("--preset", a.preset, "paper or desk")->capture_default_str();
  sub->add_option("--out", a.out, "Output directory")->capture_default_str();
  if (!measure) return;
  sub->add_option("--budget-bytes", a.budget_bytes, "Memory budget for measurements")->capture_default_str();
  sub->add_option("--threads", a.threads, "Kernel threads (ATTNPROF_THREADS overrides)")->capture_default_str();
  sub->add_option("--seed", a.seed, "Seed for weights and inputs")->capture_default_str();
  sub->add_option("--repeats", a.repeats, "Inputs per grid point, seeds seed..seed+repeats-1")->capture_default_str();
  sub->add_option("--iters", a.iters, "Iterations per measurement")->capture_default_str();
  sub->add_option("--reported-iters", a.reported, "Trailing iterations averaged")->capture_default_str();
}

int run(int argc, char** argv) {
  CLI::App app{"Encoder efficiency profiler: latency, throughput, memory, parameters and analytic cost"};
  app.require_subcommand(1);
  Args a;

  auto* list = app.add_subcommand("list-models", "List the encoder archetypes");
  auto* profile = app.add_subcommand("profile", "Measure models at a few sizes with layerwise latency");
  add_common(profile, a, true);
  auto* sweep = app.add_subcommand("sweep", "Measure models over a grid; resumable");
  add_common(sweep, a, true);
  auto* layerwise = app.add_subcommand("layerwise", "Per-layer-type cost shares over a grid");
  add_common(layerwise, a, true);
  layerwise->add_option("--source", a.source, "empirical or analytic")->capture_default_str();
  auto* cost = app.add_subcommand("cost", "Analytic FLOPs, bytes and parameters; prints sweep JSON");
  add_common(cost, a, false);
  auto* tipping = app.add_subcommand("tipping-point", "Sustained crossover between vanilla and efficient curves");
  tipping->add_option("--in", a.in, "Sweep JSON (default: stdin)");
  tipping->add_option("--metrics,--metric", a.metrics, "Restrict to one metric")->delimiter(',');
  tipping->add_option("--vanilla", a.vanilla, "Vanilla model name");
  tipping->add_option("--efficient", a.efficient, "Efficient model name");
  tipping->add_option("--smoothing", a.smoothing, "Moving-average window, 1 = off")->capture_default_str();
  tipping->add_option("--out", a.out, "Output directory")->capture_default_str();
  auto* report = app.add_subcommand("report", "Charts, tables and tipping-point summary from a sweep");
  report->add_option("--in", a.in, "Sweep JSON")->required();
  report->add_option("--out", a.out, "Output directory")->capture_default_str();
  report->add_option("--smoothing", a.smoothing, "Moving-average window for tipping points")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (list->parsed()) return cmd_list_models();
    if (profile->parsed()) {
      Args p = a;
      if (p.grid.empty()) throw UsageError("profile needs --grid (sizes to measure)");
      return cmd_sweep(p, true, true, "profile", {Metric::LatencyMs, Metric::MaxMemoryBytes, Metric::ParamCount});
    }
    if (sweep->parsed()) return cmd_sweep(a, false, false, "sweep", {Metric::LatencyMs, Metric::MaxMemoryBytes});
    if (layerwise->parsed()) return cmd_layerwise(a);
    if (cost->parsed()) return cmd_cost(a);
    if (tipping->parsed()) return cmd_tipping_point(a);
    if (report->parsed()) return cmd_report(a);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.get_subcommands().front()->help();
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMeasurementError;
  }
  return kUsageError;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc == 3 && std::string(argv[1]) == "--replay") {
    std::ifstream in(argv[2]);
    if (!in) {
      std::cerr << "error: cannot read " << argv[2] << "\n";
      return kUsageError;
    }
    std::vector<std::string> args;
    try {
      args = json::parse(in).at("replay_argv").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      std::cerr << "error: " << argv[2] << ": " << e.what() << "\n";
      return kUsageError;
    }
    std::vector<char*> ptrs;
    for (auto& s : args) ptrs.push_back(s.data());
    return run(static_cast<int>(ptrs.size()), ptrs.data());
  }
  return run(argc, argv);
}
