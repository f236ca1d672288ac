#include "attnprof/analysis/analysis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "attnprof/errors.hpp"
#include "attnprof/modelzoo/presets.hpp"

namespace attnprof {

void validate(const Curve& curve) {
  if (curve.sizes.size() != curve.values.size()) throw ConfigError("curve " + curve.model + ": size/value count differs");
  for (std::size_t i = 1; i < curve.sizes.size(); ++i) {
    if (!(curve.sizes[i] > curve.sizes[i - 1])) {
      throw ConfigError("curve " + curve.model + ": sizes must be strictly increasing");
    }
  }
}

Direction direction_of(Metric metric) {
  return metric == Metric::ThroughputExPerSec ? Direction::HigherIsBetter : Direction::LowerIsBetter;
}

namespace {

std::vector<double> smooth(const std::vector<double>& v, int window) {
  if (window <= 1) return v;
  const auto half = static_cast<std::ptrdiff_t>(window / 2);
  const auto n = static_cast<std::ptrdiff_t>(v.size());
  std::vector<double> out(v.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto lo = std::max<std::ptrdiff_t>(0, i - half), hi = std::min(n - 1, i + half);
    double s = 0;
    for (auto j = lo; j <= hi; ++j) s += v[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

}  // namespace

std::optional<double> tipping_point(const Curve& vanilla, const Curve& efficient, Direction direction,
                                    const TippingOptions& options) {
  validate(vanilla);
  validate(efficient);
  if (vanilla.sizes != efficient.sizes) {
    throw DimensionError("tipping point: " + vanilla.model + " and " + efficient.model + " are on different grids");
  }
  const auto v = smooth(vanilla.values, options.smoothing_window);
  const auto e = smooth(efficient.values, options.smoothing_window);
  std::optional<double> found;
  for (std::size_t i = v.size(); i-- > 0;) {
    const bool better = direction == Direction::LowerIsBetter ? e[i] < v[i] : e[i] > v[i];
    if (!better) break;
    found = vanilla.sizes[i];
  }
  return found;
}

namespace {

using CurveKey = std::tuple<std::string, std::string, Mode, Metric, Source>;

CurveKey key_of(const ProfileRecord& r) { return {r.model, r.preset, r.mode, r.metric, r.source}; }

}  // namespace

std::vector<Curve> curves_from(const SweepResult& sweep) {
  std::map<CurveKey, std::pair<Modality, std::map<double, std::pair<double, int>>>> groups;
  for (const auto& r : sweep.records) {
    if (r.error) continue;
    auto& g = groups[key_of(r)];
    g.first = r.modality;
    auto& [sum, count] = g.second[r.size];
    sum += r.value;
    ++count;
  }
  std::vector<Curve> out;
  for (const auto& [key, g] : groups) {
    Curve c;
    std::tie(c.model, c.preset, c.mode, c.metric, c.source) = key;
    c.modality = g.first;
    for (const auto& [size, acc] : g.second) {
      c.sizes.push_back(size);
      c.values.push_back(acc.first / acc.second);
    }
    out.push_back(std::move(c));
  }
  return out;
}

Curve find_curve(const SweepResult& sweep, const std::string& model, Metric metric, std::optional<Source> source,
                 std::optional<Mode> mode) {
  std::vector<std::string> names;
  for (auto& c : curves_from(sweep)) {
    names.push_back(c.model);
    if (c.model == model && c.metric == metric && (!source || c.source == *source) && (!mode || c.mode == *mode)) {
      return c;
    }
  }
  std::string msg = "no " + std::string(metric_name(metric)) + " curve for model '" + model + "'";
  const auto close = suggest_names(model, names);
  if (!close.empty() && close.front() != model) msg += "; did you mean " + close.front() + "?";
  throw LookupError(msg);
}

std::vector<LayerShares> layerwise_breakdown(const std::vector<ProfileRecord>& records) {
  std::map<double, std::tuple<double, std::map<LayerTag, double>, int>> by_size;
  for (const auto& r : records) {
    if (r.error) continue;
    if (r.breakdown.empty()) {
      throw ConfigError("layerwise: record " + r.key() + " has no breakdown");
    }
    if (key_of(r) != key_of(records.front())) {
      throw ConfigError("layerwise: records mix models, metrics or sources");
    }
    auto& [total, tags, count] = by_size[r.size];
    total += r.value;
    for (const auto& [tag, v] : r.breakdown) tags[tag] += v;
    ++count;
  }
  std::vector<LayerShares> out;
  for (const auto& [size, acc] : by_size) {
    const auto& [total_sum, tag_sum, count] = acc;
    LayerShares s;
    s.size = size;
    s.total = total_sum / count;
    double covered = 0;
    for (const auto& [tag, v] : tag_sum) covered += v / count;
    const double denom = std::max(s.total, covered);
    if (!(denom > 0)) {
      s.shares[{TagKind::Other, 0}] = 1.0;
    } else {
      for (const auto& [tag, v] : tag_sum) s.shares[tag] += v / count / denom;
      if (s.total > covered) s.shares[{TagKind::Other, 0}] += (s.total - covered) / denom;
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::map<TagKind, double> shares_by_kind(const LayerShares& shares) {
  std::map<TagKind, double> out;
  for (const auto& [tag, v] : shares.shares) out[tag.kind] += v;
  return out;
}

std::optional<bool> is_efficient_model(const std::string& model) {
  for (const auto& a : archetypes()) {
    if (a.name == model) return is_efficient_family(a.family);
  }
  return std::nullopt;
}

std::vector<TippingResult> all_tipping_points(const SweepResult& sweep, const TippingOptions& options) {
  const auto curves = curves_from(sweep);
  std::vector<TippingResult> out;
  for (const auto& v : curves) {
    if (is_efficient_model(v.model) != false || v.metric == Metric::ParamCount) continue;
    for (const auto& e : curves) {
      if (is_efficient_model(e.model) != true) continue;
      if (e.modality != v.modality || e.mode != v.mode || e.metric != v.metric || e.source != v.source ||
          e.preset != v.preset) {
        continue;
      }
      TippingResult t{v.model, e.model, v.modality, v.mode, v.metric, v.source, std::nullopt, std::nullopt};
      try {
        t.size = tipping_point(v, e, direction_of(v.metric), options);
      } catch (const std::exception& ex) {
        t.error = ex.what();
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

std::string format_tipping(const TippingResult& t) {
  std::string s = std::string(metric_name(t.metric)) + " " + std::string(mode_name(t.mode)) + " " +
                  std::string(source_name(t.source)) + " " + std::string(modality_name(t.modality)) + ": " +
                  t.vanilla + " -> " + t.efficient + ": ";
  if (t.error) return s + "error: " + *t.error;
  if (!t.size) return s + "none";
  return s + format_number(*t.size);
}

double chart_x(Modality modality, double size) {
  return modality == Modality::Speech ? static_cast<double>(kSpeechTokensPerSecond) * size : size;
}

// --- SVG emission ---------------------------------------------------------

namespace {

constexpr double kWidth = 820, kHeight = 500;
constexpr double kLeft = 80, kRight = 200, kTop = 40, kBottom = 60;

const char* const kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  return out;
}

std::string kind_color(TagKind k) {
  switch (k) {
    case TagKind::InputEmbedding: return "#4c72b0";
    case TagKind::PositionalEmbedding: return "#dd8452";
    case TagKind::SelfAttention: return "#c44e52";
    case TagKind::Intermediate: return "#55a868";
    case TagKind::Output: return "#8172b3";
    case TagKind::Other: return "#937860";
  }
  return "#000000";
}

// Mixes `hex` toward white by `t` in [0, 1).
std::string lighten(const std::string& hex, double t) {
  auto channel = [&](int i) {
    const int v = std::stoi(hex.substr(1 + 2 * i, 2), nullptr, 16);
    return static_cast<int>(std::lround(v + (255 - v) * t));
  };
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", channel(0), channel(1), channel(2));
  return buf;
}

struct Axis {
  double lo = 0, hi = 1;
  bool log = false;
  double pixel_lo = 0, pixel_hi = 1;

  double map(double v) const {
    const double a = log ? std::log10(lo) : lo, b = log ? std::log10(hi) : hi;
    const double x = log ? std::log10(v) : v;
    const double t = b > a ? (x - a) / (b - a) : 0.5;
    return pixel_lo + t * (pixel_hi - pixel_lo);
  }

  std::vector<double> ticks() const {
    std::vector<double> out;
    if (log) {
      for (double d = std::floor(std::log10(lo)); d <= std::ceil(std::log10(hi)); d += 1) {
        const double v = std::pow(10.0, d);
        if (v >= lo * (1 - 1e-9) && v <= hi * (1 + 1e-9)) out.push_back(v);
      }
      if (out.size() < 2) out = {lo, hi};
    } else {
      for (int i = 0; i <= 5; ++i) out.push_back(lo + (hi - lo) * i / 5.0);
    }
    return out;
  }
};

Axis make_axis(std::vector<double> values, double pixel_lo, double pixel_hi, bool allow_log) {
  Axis a;
  a.pixel_lo = pixel_lo;
  a.pixel_hi = pixel_hi;
  if (values.empty()) return a;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  a.log = allow_log && *mn > 0;
  if (a.log) {
    a.lo = *mn / 1.1;
    a.hi = *mx * 1.1;
  } else {
    a.lo = std::min(0.0, *mn);
    a.hi = *mx > a.lo ? *mx * 1.05 : a.lo + 1;
  }
  return a;
}

void svg_open(std::ostringstream& os, const std::string& title) {
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth) << "\" height=\"" << num(kHeight)
     << "\" viewBox=\"0 0 " << num(kWidth) << " " << num(kHeight) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<title>" << escape(title) << "</title>\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << num(kWidth) << "\" height=\"" << num(kHeight) << "\" fill=\"#ffffff\"/>\n";
  os << "<text x=\"" << num(kLeft) << "\" y=\"24\" font-size=\"14\">" << escape(title) << "</text>\n";
}

void svg_axes(std::ostringstream& os, const Axis& x, const Axis& y, const std::string& xlabel,
              const std::string& ylabel) {
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  os << "<g class=\"axes\" stroke=\"#000000\">\n";
  os << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x1) << "\" y2=\"" << num(y0) << "\"/>\n";
  os << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x0) << "\" y2=\"" << num(y1) << "\"/>\n";
  os << "</g>\n<g class=\"ticks\" fill=\"#000000\">\n";
  for (double t : x.ticks()) {
    const double px = x.map(t);
    os << "<line x1=\"" << num(px) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(px) << "\" y2=\"" << num(y0 + 5)
       << "\" stroke=\"#000000\"/>\n";
    os << "<text x=\"" << num(px) << "\" y=\"" << num(y0 + 18) << "\" text-anchor=\"middle\">" << label(t)
       << "</text>\n";
  }
  for (double t : y.ticks()) {
    const double py = y.map(t);
    os << "<line x1=\"" << num(x0 - 5) << "\" y1=\"" << num(py) << "\" x2=\"" << num(x0) << "\" y2=\"" << num(py)
       << "\" stroke=\"#000000\"/>\n";
    os << "<text x=\"" << num(x0 - 8) << "\" y=\"" << num(py + 4) << "\" text-anchor=\"end\">" << label(t)
       << "</text>\n";
  }
  os << "</g>\n";
  os << "<text x=\"" << num((x0 + x1) / 2) << "\" y=\"" << num(kHeight - 20) << "\" text-anchor=\"middle\">"
     << escape(xlabel) << "</text>\n";
  os << "<text x=\"20\" y=\"" << num((y0 + y1) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 20 "
     << num((y0 + y1) / 2) << ")\">" << escape(ylabel) << "</text>\n";
}

std::string x_label(Modality m) {
  switch (m) {
    case Modality::Text: return "input length (tokens)";
    case Modality::Speech: return "input length (nominal tokens, 50 per second)";
    case Modality::Vision: return "image side (pixels)";
  }
  return "";
}

std::string y_label(Metric m) {
  switch (m) {
    case Metric::LatencyMs: return "latency (ms)";
    case Metric::ThroughputExPerSec: return "throughput (examples/s)";
    case Metric::MaxMemoryBytes: return "max memory (bytes)";
    case Metric::ParamCount: return "parameters";
    case Metric::Flops: return "FLOPs";
  }
  return "";
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

std::string line_chart(const std::vector<const Curve*>& curves, const std::vector<TypicalLength>& markers,
                       const std::string& title) {
  const Modality modality = curves.front()->modality;
  std::vector<double> xs, ys;
  for (const Curve* c : curves) {
    for (std::size_t i = 0; i < c->sizes.size(); ++i) {
      xs.push_back(chart_x(modality, c->sizes[i]));
      ys.push_back(c->values[i]);
    }
  }
  for (const auto& m : markers) xs.push_back(static_cast<double>(m.tokens));
  const Axis x = make_axis(xs, kLeft, kWidth - kRight, true);
  const Axis y = make_axis(ys, kHeight - kBottom, kTop, true);

  std::ostringstream os;
  svg_open(os, title);
  svg_axes(os, x, y, x_label(modality), y_label(curves.front()->metric));
  os << "<g class=\"markers\">\n";
  for (const auto& m : markers) {
    const double px = x.map(static_cast<double>(m.tokens));
    os << "<line class=\"marker\" data-dataset=\"" << escape(m.dataset) << "\" data-x=\"" << m.tokens << "\" x1=\""
       << num(px) << "\" y1=\"" << num(kHeight - kBottom) << "\" x2=\"" << num(px) << "\" y2=\"" << num(kTop)
       << "\" stroke=\"#999999\" stroke-dasharray=\"4 3\"/>\n";
    os << "<text class=\"marker-label\" x=\"" << num(px + 2) << "\" y=\"" << num(kTop + 10)
       << "\" transform=\"rotate(90 " << num(px + 2) << " " << num(kTop + 10) << ")\" fill=\"#666666\">"
       << escape(m.dataset) << " (" << m.tokens << ")</text>\n";
  }
  os << "</g>\n<g class=\"series-group\">\n";
  for (std::size_t s = 0; s < curves.size(); ++s) {
    const Curve& c = *curves[s];
    os << "<polyline class=\"series\" data-model=\"" << escape(c.model) << "\" fill=\"none\" stroke=\""
       << kPalette[s % 10] << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < c.sizes.size(); ++i) {
      if (i) os << ' ';
      os << num(x.map(chart_x(modality, c.sizes[i]))) << ',' << num(y.map(c.values[i]));
    }
    os << "\"/>\n";
  }
  os << "</g>\n<g class=\"legend\">\n";
  for (std::size_t s = 0; s < curves.size(); ++s) {
    const double ly = kTop + 10 + 18.0 * static_cast<double>(s);
    os << "<rect class=\"legend-swatch\" x=\"" << num(kWidth - kRight + 15) << "\" y=\"" << num(ly - 8)
       << "\" width=\"12\" height=\"12\" fill=\"" << kPalette[s % 10] << "\"/>\n";
    os << "<text x=\"" << num(kWidth - kRight + 32) << "\" y=\"" << num(ly + 2) << "\">" << escape(curves[s]->model)
       << "</text>\n";
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

std::string stacked_chart(const Curve& curve, const std::vector<LayerShares>& shares, const std::string& title) {
  std::set<LayerTag> tags;
  int max_index = 0;
  for (const auto& s : shares) {
    for (const auto& [tag, v] : s.shares) {
      tags.insert(tag);
      max_index = std::max(max_index, tag.layer_index);
    }
  }
  std::vector<double> xs;
  for (const auto& s : shares) xs.push_back(chart_x(curve.modality, s.size));
  const Axis x = make_axis(xs, kLeft, kWidth - kRight, true);
  Axis y;
  y.lo = 0;
  y.hi = 1;
  y.pixel_lo = kHeight - kBottom;
  y.pixel_hi = kTop;

  std::ostringstream os;
  svg_open(os, title);
  svg_axes(os, x, y, x_label(curve.modality), "share of " + y_label(curve.metric));
  os << "<g class=\"layers\">\n";
  std::vector<double> below(shares.size(), 0.0);
  for (const LayerTag& tag : tags) {
    std::vector<double> above(below);
    for (std::size_t i = 0; i < shares.size(); ++i) {
      const auto it = shares[i].shares.find(tag);
      if (it != shares[i].shares.end()) above[i] += it->second;
    }
    const double shade = max_index > 0 ? 0.6 * tag.layer_index / (max_index + 1.0) : 0.0;
    os << "<polygon class=\"layer\" data-tag=\"" << to_string(tag) << "\" fill=\""
       << lighten(kind_color(tag.kind), shade) << "\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < shares.size(); ++i) {
      if (i) os << ' ';
      os << num(x.map(xs[i])) << ',' << num(y.map(above[i]));
    }
    for (std::size_t i = shares.size(); i-- > 0;) os << ' ' << num(x.map(xs[i])) << ',' << num(y.map(below[i]));
    os << "\"/>\n";
    below = std::move(above);
  }
  os << "</g>\n<g class=\"legend\">\n";
  int row = 0;
  for (TagKind k : kAllTagKinds) {
    const double ly = kTop + 10 + 18.0 * row++;
    os << "<rect class=\"legend-swatch\" x=\"" << num(kWidth - kRight + 15) << "\" y=\"" << num(ly - 8)
       << "\" width=\"12\" height=\"12\" fill=\"" << kind_color(k) << "\"/>\n";
    os << "<text x=\"" << num(kWidth - kRight + 32) << "\" y=\"" << num(ly + 2) << "\">" << tag_kind_name(k)
       << "</text>\n";
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

std::string shares_csv(const std::vector<LayerShares>& shares) {
  std::set<LayerTag> tags;
  for (const auto& s : shares)
    for (const auto& [tag, v] : s.shares) tags.insert(tag);
  std::ostringstream os;
  os << "size,total";
  for (const auto& t : tags) os << ',' << to_string(t);
  os << '\n';
  for (const auto& s : shares) {
    os << format_number(s.size) << ',' << format_number(s.total);
    for (const auto& t : tags) {
      const auto it = s.shares.find(t);
      os << ',' << format_number(it == s.shares.end() ? 0.0 : it->second);
    }
    os << '\n';
  }
  return os.str();
}

std::string curve_stem(const Curve& c) {
  return slug(c.model) + "_" + std::string(metric_name(c.metric)) + "_" + std::string(mode_name(c.mode)) + "_" +
         std::string(source_name(c.source)) + (c.preset.empty() ? "" : "_" + slug(c.preset));
}

}  // namespace

ReportFiles emit_report(const SweepResult& sweep, const std::vector<TypicalLength>& typical,
                        const ReportOptions& options) {
  if (sweep.records.empty()) throw ConfigError("report: the sweep has no records");
  const std::filesystem::path dir(options.out_dir.empty() ? "." : options.out_dir);
  std::filesystem::create_directories(dir);
  ReportFiles files;

  const auto curves = curves_from(sweep);
  using GroupKey = std::tuple<Modality, Mode, Metric, Source, std::string>;
  std::map<GroupKey, std::vector<const Curve*>> groups;
  for (const auto& c : curves) groups[{c.modality, c.mode, c.metric, c.source, c.preset}].push_back(&c);

  for (const auto& [key, members] : groups) {
    const auto& [modality, mode, metric, source, preset] = key;
    std::vector<TypicalLength> markers;
    for (const auto& t : typical)
      if (t.modality == modality) markers.push_back(t);
    const std::string stem = std::string(metric_name(metric)) + "_" + std::string(modality_name(modality)) + "_" +
                             std::string(mode_name(mode)) + "_" + std::string(source_name(source)) +
                             (preset.empty() ? "" : "_" + slug(preset));
    const std::string title = std::string(y_label(metric)) + ", " + std::string(modality_name(modality)) + ", " +
                              std::string(mode_name(mode)) + " (" + std::string(source_name(source)) + ")";
    const auto path = dir / (stem + ".svg");
    write_file(path, line_chart(members, markers, title));
    files.charts.push_back(path.string());
  }

  for (const auto& c : curves) {
    if (c.metric == Metric::ParamCount) continue;
    std::vector<ProfileRecord> records;
    bool complete = true;
    for (const auto& r : sweep.records) {
      if (r.error || r.model != c.model || r.preset != c.preset || r.mode != c.mode || r.metric != c.metric ||
          r.source != c.source) {
        continue;
      }
      if (r.breakdown.empty()) complete = false;
      records.push_back(r);
    }
    if (records.empty() || !complete) continue;
    const auto shares = layerwise_breakdown(records);
    const std::string stem = "layerwise_" + curve_stem(c);
    const std::string title = "layerwise " + y_label(c.metric) + ", " + c.model + ", " +
                              std::string(mode_name(c.mode)) + " (" + std::string(source_name(c.source)) + ")";
    write_file(dir / (stem + ".svg"), stacked_chart(c, shares, title));
    write_file(dir / (stem + ".csv"), shares_csv(shares));
    files.layerwise_charts.push_back((dir / (stem + ".svg")).string());
    files.tables.push_back((dir / (stem + ".csv")).string());
  }

  write_file(dir / "sweep.csv", sweep_to_csv(sweep));
  files.tables.push_back((dir / "sweep.csv").string());

  std::size_t errors = 0;
  for (const auto& r : sweep.records) errors += r.error ? 1 : 0;
  std::ostringstream summary;
  summary << "records: " << sweep.records.size() << " (" << errors << " with errors)\n";
  summary << "curves: " << curves.size() << "\n";
  summary << "tipping points (sustained crossover, grid units):\n";
  const auto tips = all_tipping_points(sweep, options.tipping);
  if (tips.empty()) summary << "  no vanilla/efficient pairs\n";
  for (const auto& t : tips) summary << "  " << format_tipping(t) << "\n";
  write_file(dir / "summary.txt", summary.str());
  files.summary = (dir / "summary.txt").string();
  return files;
}

}  // namespace attnprof
