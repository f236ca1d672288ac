#include "attnprof/costmodel/costmodel.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "attnprof/errors.hpp"
#include "attnprof/modelzoo/model.hpp"
#include "attnprof/modelzoo/params.hpp"
#include "attnprof/workloads/workloads.hpp"

namespace attnprof {

namespace {

using i64 = std::int64_t;

constexpr i64 kFloat = 4;
constexpr i64 kElementOps = 5;
constexpr i64 kQueryBlock = 64;  // query rows per sliding-window band block
constexpr LayerTag kOther0{TagKind::Other, 0};
constexpr LayerTag kEmbed0{TagKind::InputEmbedding, 0};
constexpr LayerTag kPos0{TagKind::PositionalEmbedding, 0};

// Replays allocations, releases and op tallies of one forward pass. Tensors
// that the training tape keeps are released with drop(), which is a no-op
// when retaining.
class Sim {
 public:
  explicit Sim(bool retain) : retain_(retain) {}

  int alloc(const LayerTag& tag, i64 floats) {
    if (floats <= 0) return -1;
    const i64 bytes = floats * kFloat;
    const int id = next_++;
    live_[id] = {tag, bytes};
    current_ += bytes;
    peak_ = std::max(peak_, current_);
    auto& t = tags_[tag];
    t.current += bytes;
    t.peak = std::max(t.peak, t.current);
    return id;
  }
  void free(int id) {
    if (id < 0) return;
    auto it = live_.find(id);
    if (it == live_.end()) return;
    current_ -= it->second.bytes;
    tags_[it->second.tag].current -= it->second.bytes;
    live_.erase(it);
  }
  void drop(int id) {
    if (!retain_) free(id);
  }
  // Per-row norm statistics (mean, rstd) exist only on the tape.
  void stats(const LayerTag& tag, i64 rows) {
    if (retain_) {
      alloc(tag, rows);
      alloc(tag, rows);
    }
  }

  // Scratch that lives only inside one kernel call (e.g. gemm_nt's transposed operand).
  void transient(const LayerTag& tag, i64 floats) { free(alloc(tag, floats)); }

  void macs(const LayerTag& tag, i64 n) { cost_[tag].macs += n; }
  void elem(const LayerTag& tag, i64 n) { cost_[tag].elementwise += n * kElementOps; }

  bool retain() const { return retain_; }
  i64 peak() const { return peak_; }

  std::map<LayerTag, TagCost> finish() const {
    std::map<LayerTag, TagCost> out = cost_;
    for (const auto& [tag, t] : tags_) out[tag].bytes = t.peak;
    return out;
  }

 private:
  struct Live {
    LayerTag tag;
    i64 bytes;
  };
  struct TagBytes {
    i64 current = 0;
    i64 peak = 0;
  };
  bool retain_;
  int next_ = 0;
  i64 current_ = 0;
  i64 peak_ = 0;
  std::unordered_map<int, Live> live_;
  std::map<LayerTag, TagBytes> tags_;
  std::map<LayerTag, TagCost> cost_;
};

// y = x W (+ b): allocates the output, tallies rows*in*out.
int linear(Sim& s, const LayerTag& tag, i64 rows, i64 in, i64 out) {
  s.macs(tag, rows * in * out);
  return s.alloc(tag, rows * out);
}

int layernorm(Sim& s, const LayerTag& tag, i64 rows, i64 width) {
  s.elem(tag, rows * width);
  const int y = s.alloc(tag, rows * width);
  s.stats(tag, rows);
  return y;
}

// conv1d: padded copy, gathered taps, output, im2col column.
int conv1d(Sim& s, const LayerTag& tag, i64 c_in, i64 length, i64 c_out, i64 kernel, i64 stride, i64 padding,
           i64 groups) {
  const i64 out_len = (length + 2 * padding - kernel) / stride + 1;
  const i64 cin_g = c_in / groups;
  s.macs(tag, c_out * out_len * cin_g * kernel);
  const int padded = padding > 0 ? s.alloc(tag, c_in * (length + 2 * padding)) : -1;
  const int taps = s.alloc(tag, c_out * cin_g * kernel);
  const int out = s.alloc(tag, c_out * out_len);
  const int column = s.alloc(tag, cin_g * out_len);
  s.free(column);
  s.free(taps);
  s.free(padded);
  return out;
}

struct SeqGeometry {
  i64 batch, n, width, heads, ff;
  AttentionKind kind;
  i64 radius = 0, globals = 0;
  i64 landmarks = 0, iterations = 0;
  // shifted windows
  i64 height = 0, grid_w = 0, window = 0, padded_h = 0, padded_w = 0;
};

i64 sliding_keys(i64 n, i64 radius, i64 g) {
  i64 keys = 0;
  for (i64 i = g; i < n; ++i) {
    const i64 lo = std::max(g, i - radius), hi = std::min(n - 1, i + radius);
    keys += g + std::max<i64>(0, hi - lo + 1);
  }
  return keys;
}

void nystrom_head(Sim& s, const LayerTag& sa, i64 n, i64 dh, i64 m, i64 iterations) {
  const int ql = s.alloc(sa, m * dh), kl = s.alloc(sa, m * dh);
  // gemm_nt transposes its right operand: k_land twice, then the head's keys.
  const int k1 = s.alloc(sa, n * m);
  s.transient(sa, m * dh);
  s.macs(sa, n * dh * m);
  s.elem(sa, n * m);
  const int k2 = s.alloc(sa, m * m);
  s.transient(sa, m * dh);
  s.macs(sa, m * dh * m);
  s.elem(sa, m * m);
  const int k3 = s.alloc(sa, m * n);
  s.transient(sa, n * dh);
  s.macs(sa, m * dh * n);
  s.elem(sa, m * n);

  const i64 mm = m * m;
  int z = s.alloc(sa, mm);
  s.free(s.alloc(sa, mm));  // residual check
  for (i64 it = 0; it < iterations; ++it) {
    if (s.retain()) s.alloc(sa, mm);  // iterate kept for the backward pass
    const int x = s.alloc(sa, mm), p = s.alloc(sa, mm);
    const int q = s.alloc(sa, mm), r = s.alloc(sa, mm);
    const int next = s.alloc(sa, mm);
    s.macs(sa, 4 * m * mm);
    s.free(z);
    z = next;
    s.free(s.alloc(sa, mm));
    s.free(x);
    s.free(p);
    s.free(q);
    s.free(r);
  }
  s.macs(sa, m * n * dh);
  const int w = s.alloc(sa, m * dh);
  s.macs(sa, m * m * dh);
  const int u = s.alloc(sa, m * dh);
  s.macs(sa, n * m * dh);
  for (int id : {ql, kl, k1, k2, k3, w, u, z}) s.drop(id);
}

// One post-LN encoder block; consumes x, returns the output id.
int block(Sim& s, int index, int x, const SeqGeometry& g) {
  const LayerTag sa{TagKind::SelfAttention, index}, other{TagKind::Other, index};
  const LayerTag inter{TagKind::Intermediate, index}, output{TagKind::Output, index};
  const i64 d = g.width, b = g.batch, h = g.heads, dh = d / h;
  const bool windowed = g.kind == AttentionKind::ShiftedWindow;
  const i64 rows = windowed ? b * g.height * g.grid_w : b * g.n;
  const i64 att_rows = windowed ? b * g.padded_h * g.padded_w : rows;

  int a;
  {
    std::vector<int> scoped;
    if (windowed) scoped.push_back(s.alloc(sa, att_rows * d));  // rolled and padded input
    scoped.push_back(linear(s, sa, att_rows, d, d));
    scoped.push_back(linear(s, sa, att_rows, d, d));
    scoped.push_back(linear(s, sa, att_rows, d, d));
    int ctx = -1;
    switch (g.kind) {
      case AttentionKind::Full: {
        const i64 n = g.n;
        const int probs = s.alloc(sa, b * h * n * n);
        ctx = s.alloc(sa, rows * d);
        s.transient(sa, n * dh);
        s.macs(sa, b * h * 2 * n * n * dh);
        s.elem(sa, b * h * n * n);
        s.drop(probs);
        break;
      }
      case AttentionKind::SlidingWindow: {
        const i64 n = g.n, ng = std::min(g.globals, n);
        if (ng > 0) {
          scoped.push_back(s.alloc(sa, b * ng * d));
          scoped.push_back(linear(s, sa, b * ng, d, d));
          scoped.push_back(linear(s, sa, rows, d, d));
          scoped.push_back(linear(s, sa, rows, d, d));
        }
        const int probs = s.alloc(sa, b * h * n * (ng + 2 * g.radius + 1));
        ctx = s.alloc(sa, rows * d);
        const int scratch = s.alloc(sa, kQueryBlock * (kQueryBlock + 2 * g.radius));
        i64 widest = ng;
        for (i64 i0 = ng; i0 < n; i0 += kQueryBlock) {
          const i64 lo = std::max(ng, i0 - g.radius), hi = std::min(n, std::min(n, i0 + kQueryBlock) + g.radius);
          widest = std::max(widest, hi - lo);
        }
        s.transient(sa, widest * dh);
        const i64 keys = sliding_keys(n, g.radius, ng);
        s.macs(sa, 2 * b * h * keys * dh);
        s.elem(sa, b * h * keys);
        if (ng > 0) {
          const int gp = s.alloc(sa, b * h * ng * n);
          s.transient(sa, n * dh);
          s.macs(sa, b * h * 2 * ng * n * dh);
          s.elem(sa, b * h * ng * n);
          s.drop(gp);
        }
        s.free(scratch);
        s.drop(probs);
        break;
      }
      case AttentionKind::Nystrom: {
        ctx = s.alloc(sa, rows * d);
        const i64 m = std::min(g.landmarks, g.n);
        for (i64 head = 0; head < b * h; ++head) nystrom_head(s, sa, g.n, dh, m, g.iterations);
        break;
      }
      case AttentionKind::ShiftedWindow: {
        const i64 w = g.window, side = 2 * w - 1, tokens = w * w;
        const i64 windows = b * (g.padded_h / w) * (g.padded_w / w);
        scoped.push_back(s.alloc(sa, side * side * h));  // cropped bias table
        const int probs = s.alloc(sa, windows * h * tokens * tokens);
        ctx = s.alloc(sa, att_rows * d);
        int gathered[4];
        for (int& id : gathered) id = s.alloc(sa, tokens * d);
        s.transient(sa, tokens * dh);
        s.macs(sa, windows * h * 2 * tokens * tokens * dh);
        s.elem(sa, windows * h * tokens * tokens);
        for (int id : gathered) s.free(id);
        s.drop(probs);
        break;
      }
    }
    scoped.push_back(ctx);
    a = linear(s, sa, att_rows, d, d);
    if (windowed) {
      const int cropped = s.alloc(sa, rows * d);
      s.free(a);
      a = cropped;
    }
    for (int id : scoped) s.drop(id);
  }
  const int hid = layernorm(s, other, rows, d);
  s.drop(x);
  s.drop(a);
  const int u = linear(s, inter, rows, d, g.ff);
  s.elem(other, rows * g.ff);
  const int act = s.alloc(other, rows * g.ff);
  s.drop(u);
  const int s2 = linear(s, output, rows, g.ff, d);
  s.drop(act);
  const int y = layernorm(s, other, rows, d);
  s.drop(hid);
  s.drop(s2);
  return y;
}

SeqGeometry sequence_geometry(const ModelConfig& c, i64 batch, i64 n) {
  SeqGeometry g{batch, n, c.d_model, c.n_heads, c.d_ff, c.attention()};
  if (g.kind == AttentionKind::SlidingWindow) {
    g.radius = c.attention_window.value_or(0) / 2;
    g.globals = c.global_tokens;
  } else if (g.kind == AttentionKind::Nystrom) {
    g.landmarks = std::min(c.n_landmarks, n);
    g.iterations = c.pinv_iterations;
  }
  return g;
}

struct Walk {
  int hidden = -1;
  i64 pooled_width = 0;
};

int pooler_tail(Sim& s, const ModelConfig& c, i64 batch) {
  const i64 d = c.d_model;
  const int first = s.alloc(kOther0, batch * d);
  if (!c.pooler) return first;
  const int pre = linear(s, kOther0, batch, d, d);
  s.elem(kOther0, batch * d);
  const int pooled = s.alloc(kOther0, batch * d);
  s.free(pre);
  s.drop(first);
  return pooled;
}

Walk walk_text(Sim& s, const ModelConfig& c, i64 batch, i64 n) {
  const i64 d = c.d_model, rows = batch * n;
  const int x = s.alloc(kEmbed0, rows * d);
  s.free(s.alloc(kPos0, rows * d));
  int y = layernorm(s, kOther0, rows, d);
  s.drop(x);
  const SeqGeometry g = sequence_geometry(c, batch, n);
  for (int l = 0; l < c.n_layers; ++l) y = block(s, l, y, g);
  pooler_tail(s, c, batch);
  return {y, d};
}

Walk walk_speech(Sim& s, const ModelConfig& c, i64 batch, i64 samples, i64 frames) {
  const i64 d = c.d_model, channels = c.featurizer.back().channels, rows = batch * frames;
  const int features = s.alloc(kOther0, rows * channels);
  for (i64 b = 0; b < batch; ++b) {
    int x = s.alloc(kEmbed0, samples);
    i64 c_in = 1, length = samples;
    for (std::size_t i = 0; i < c.featurizer.size(); ++i) {
      const auto& l = c.featurizer[i];
      const LayerTag tag{TagKind::InputEmbedding, static_cast<int>(i)};
      int y = conv1d(s, tag, c_in, length, l.channels, l.kernel, l.stride, 0, 1);
      length = (length - l.kernel) / l.stride + 1;
      if (i == 0) {
        s.elem(kOther0, l.channels * length);
        const int normed = s.alloc(kOther0, l.channels * length);
        s.stats(kOther0, l.channels);
        s.drop(y);
        y = normed;
      }
      s.elem(kOther0, l.channels * length);
      const int a = s.alloc(kOther0, l.channels * length);
      s.drop(x);
      x = a;
      s.drop(y);
      c_in = l.channels;
    }
    s.free(x);
  }
  const int normed = layernorm(s, kOther0, rows, channels);
  s.drop(features);

  const i64 k = c.pos_conv_kernel, groups = c.pos_conv_groups;
  const int hproj = linear(s, kPos0, rows, channels, d);
  s.drop(normed);
  const int weight = s.alloc(kPos0, d * (d / groups) * k);
  const int pre = s.alloc(kPos0, rows * d);
  for (i64 b = 0; b < batch; ++b) {
    const int xt = s.alloc(kPos0, d * frames);
    const int y = conv1d(s, kPos0, d, frames, d, k, 1, k / 2, groups);
    s.free(y);
    s.free(xt);
  }
  s.drop(weight);
  s.elem(kOther0, rows * d);
  const int sum = s.alloc(kOther0, rows * d);
  int y = layernorm(s, kOther0, rows, d);
  s.drop(pre);
  s.drop(hproj);
  s.drop(sum);

  const SeqGeometry g = sequence_geometry(c, batch, frames);
  for (int l = 0; l < c.n_layers; ++l) y = block(s, l, y, g);
  const int hidden = linear(s, kOther0, rows, d, c.final_proj_dim);
  s.alloc(kOther0, batch * c.final_proj_dim);
  s.drop(y);
  return {hidden, c.final_proj_dim};
}

// Padded image copy, one patchified copy, batch replicas, patch projection.
int patch_embed(Sim& s, const ModelConfig& c, i64 batch, i64 padded_side, i64 patches, int* replicas) {
  const i64 patch_in = c.patch_size * c.patch_size * c.image_channels;
  const int padded = s.alloc(kEmbed0, padded_side * padded_side * c.image_channels);
  const int one = s.alloc(kEmbed0, patches * patch_in);
  s.free(padded);
  *replicas = s.alloc(kEmbed0, batch * patches * patch_in);
  s.free(one);
  return linear(s, kEmbed0, batch * patches, patch_in, c.d_model);
}

i64 padded_side(const ModelConfig& c, i64 dim) {
  return pad_input(pad_input(dim, c.pad_multiple.value_or(1)), c.patch_size);
}

Walk walk_vit(Sim& s, const ModelConfig& c, i64 batch, i64 dim) {
  const i64 d = c.d_model, side = padded_side(c, dim), grid = side / c.patch_size;
  const i64 patches = grid * grid, n = patches + 1, rows = batch * n;
  int replicas = -1;
  const int e = patch_embed(s, c, batch, side, patches, &replicas);
  int y = s.alloc(kEmbed0, rows * d);
  s.drop(replicas);
  s.free(e);
  const SeqGeometry g = sequence_geometry(c, batch, n);
  for (int l = 0; l < c.n_layers; ++l) y = block(s, l, y, g);
  const int hidden = layernorm(s, kOther0, rows, d);
  s.drop(y);
  pooler_tail(s, c, batch);
  return {hidden, d};
}

Walk walk_swin(Sim& s, const ModelConfig& c, i64 batch, i64 dim) {
  const i64 side = padded_side(c, dim);
  i64 rows = side / c.patch_size, cols = rows, width = c.d_model;
  int replicas = -1;
  const int e = patch_embed(s, c, batch, side, rows * cols, &replicas);
  s.drop(replicas);
  int x = layernorm(s, kOther0, batch * rows * cols, width);
  s.drop(e);

  const i64 ratio = c.d_ff / c.d_model;
  int index = 0;
  for (std::size_t st = 0; st < c.stage_depths.size(); ++st) {
    for (i64 j = 0; j < c.stage_depths[st]; ++j, ++index) {
      const i64 res = std::min(rows, cols);
      SeqGeometry g{batch, rows * cols, width, c.stage_heads[st], ratio * width, AttentionKind::ShiftedWindow};
      g.window = std::min(c.swin_window, res);
      g.height = rows;
      g.grid_w = cols;
      g.padded_h = pad_input(rows, g.window);
      g.padded_w = pad_input(cols, g.window);
      x = block(s, index, x, g);
    }
    if (st + 1 < c.stage_depths.size()) {
      const LayerTag tag{TagKind::Other, index - 1};
      const i64 out_rows = batch * ((rows + 1) / 2) * ((cols + 1) / 2);
      const int gathered = s.alloc(tag, out_rows * 4 * width);
      const int normed = layernorm(s, tag, out_rows, 4 * width);
      s.drop(gathered);
      const int out = linear(s, tag, out_rows, 4 * width, 2 * width);
      s.drop(normed);
      s.free(x);
      x = out;
      rows = (rows + 1) / 2;
      cols = (cols + 1) / 2;
      width *= 2;
    }
  }
  const int hidden = layernorm(s, kOther0, batch * rows * cols, width);
  s.alloc(kOther0, batch * width);
  s.drop(x);
  return {hidden, width};
}

i64 input_floats(const ModelConfig& c, i64 size) {
  switch (c.modality()) {
    case Modality::Text: return 0;
    case Modality::Speech: return size;
    case Modality::Vision: return size * size * c.image_channels;
  }
  return 0;
}

}  // namespace

CostBreakdown flops_of(const ModelConfig& config, std::int64_t size, Mode mode, const CostOptions& options) {
  validate(config);
  if (options.batch < 1) throw ConfigError("cost model: batch must be >= 1");
  CostBreakdown out;
  out.mode = mode;
  if (size <= 0) return out;
  const SequenceShape shape = sequence_shape(config, size);
  if (shape.tokens <= 0) return out;

  const bool training = mode == Mode::Training;
  const bool head = options.with_head.value_or(training);
  const i64 batch = options.batch;
  Sim s(training);

  Walk w;
  switch (config.family) {
    case Family::TextFull:
    case Family::TextSlidingWindow:
    case Family::TextNystrom: w = walk_text(s, config, batch, shape.tokens); break;
    case Family::SpeechFull:
    case Family::SpeechSlidingWindow: w = walk_speech(s, config, batch, size, shape.tokens); break;
    case Family::VisionFull: w = walk_vit(s, config, batch, size); break;
    case Family::VisionShiftedWindow: w = walk_swin(s, config, batch, size); break;
  }
  if (head) linear(s, kOther0, batch, w.pooled_width, 2);

  out.per_tag = s.finish();
  const ParamBreakdown params = count_params(config, head);
  for (const auto& [tag, count] : params.per_tag) out.per_tag[tag].params = count;
  const i64 param_bytes = params.total() * kFloat;
  out.peak_bytes = param_bytes + input_floats(config, size) * kFloat + s.peak();
  if (training) {
    for (auto& [tag, c] : out.per_tag) {
      c.macs *= kTrainingOpFactor;
      c.elementwise *= kTrainingOpFactor;
      c.bytes += c.params * kFloat;  // gradient buffers
    }
    out.peak_bytes += param_bytes;
  }
  return out;
}

std::string_view cost_metric_name(CostMetric m) { return m == CostMetric::Flops ? "flops" : "bytes"; }

std::optional<CostMetric> parse_cost_metric(std::string_view name) {
  if (name == "flops") return CostMetric::Flops;
  if (name == "bytes" || name == "memory") return CostMetric::Bytes;
  return std::nullopt;
}

double cost_value(const CostBreakdown& cost, CostMetric metric) {
  return metric == CostMetric::Flops ? static_cast<double>(cost.total().flops())
                                     : static_cast<double>(cost.peak_bytes);
}

std::optional<std::size_t> sustained_crossing(const std::vector<double>& vanilla, const std::vector<double>& efficient) {
  if (vanilla.size() != efficient.size()) throw DimensionError("tipping point: curves have different lengths");
  std::optional<std::size_t> start;
  for (std::size_t i = 0; i < vanilla.size(); ++i) {
    if (efficient[i] < vanilla[i]) {
      if (!start) start = i;
    } else {
      start.reset();
    }
  }
  return start;
}

std::optional<std::int64_t> predict_tipping_point(const ModelConfig& vanilla, const ModelConfig& efficient,
                                                  CostMetric metric, const std::vector<std::int64_t>& grid, Mode mode) {
  if (vanilla.modality() != efficient.modality()) {
    throw ConfigError("tipping point: " + vanilla.name + " and " + efficient.name + " differ in modality");
  }
  std::vector<double> a, b;
  for (i64 n : grid) {
    a.push_back(cost_value(flops_of(vanilla, n, mode), metric));
    b.push_back(cost_value(flops_of(efficient, n, mode), metric));
  }
  const auto i = sustained_crossing(a, b);
  if (!i) return std::nullopt;
  return grid[*i];
}

double non_sa_share(const ModelConfig& config, std::int64_t size, CostMetric metric) {
  const CostBreakdown cost = flops_of(config, size, Mode::Inference);
  double total = 0.0, sa = 0.0;
  for (const auto& [tag, c] : cost.per_tag) {
    const double v = metric == CostMetric::Flops ? static_cast<double>(c.flops()) : static_cast<double>(c.bytes);
    total += v;
    if (tag.kind == TagKind::SelfAttention) sa += v;
  }
  return total > 0.0 ? (total - sa) / total : 0.0;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("loglog slope: need two or more paired points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0 && y[i] > 0.0)) throw DimensionError("loglog slope: values must be positive");
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double den = n * sxx - sx * sx;
  if (den == 0.0) throw DimensionError("loglog slope: x values are all equal");
  return (n * sxy - sx * sy) / den;
}

std::int64_t self_attention_flops(const CostBreakdown& cost) { return cost.of_kind(TagKind::SelfAttention).flops(); }

std::vector<ProfileRecord> analytic_records(const ModelConfig& config, const std::vector<double>& sizes,
                                            const std::vector<Metric>& metrics, Mode mode) {
  std::vector<ProfileRecord> out;
  for (double point : sizes) {
    const CostBreakdown cost = flops_of(config, model_units(config, point), mode);
    for (Metric m : metrics) {
      if (m != Metric::Flops && m != Metric::MaxMemoryBytes && m != Metric::ParamCount) continue;
      ProfileRecord r;
      r.model = config.name;
      r.preset = config.preset;
      r.modality = config.modality();
      r.mode = mode;
      r.metric = m;
      r.source = Source::Analytic;
      r.size = point;
      r.tokens = tokens_for(config, point);
      r.meta.optimizer_update = mode == Mode::Training;
      for (const auto& [tag, c] : cost.per_tag) {
        const double v = m == Metric::Flops            ? static_cast<double>(c.flops())
                         : m == Metric::MaxMemoryBytes ? static_cast<double>(c.bytes)
                                                       : static_cast<double>(c.params);
        if (v != 0.0) r.breakdown[tag] = v;
      }
      r.value = m == Metric::Flops            ? static_cast<double>(cost.total().flops())
                : m == Metric::MaxMemoryBytes ? static_cast<double>(cost.peak_bytes)
                                              : static_cast<double>(cost.total().params);
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace attnprof
