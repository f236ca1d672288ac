#include "attnprof/modelzoo/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "attnprof/errors.hpp"
#include "layers.hpp"

namespace attnprof {

using detail::Block;
using detail::BlockCache;
using detail::BlockGeometry;
using detail::grad_of;
using detail::LayerNorm;
using detail::Linear;
using detail::ParamStore;
using nk::NormStats;
using nk::Tensor;

Modality input_modality(const ModelInput& input) {
  switch (input.index()) {
    case 0: return Modality::Text;
    case 1: return Modality::Speech;
    default: return Modality::Vision;
  }
}

std::int64_t featurizer_frames(const std::vector<ConvLayerSpec>& layers, std::int64_t samples) {
  std::int64_t t = samples;
  for (const auto& l : layers) {
    if (t < l.kernel) return 0;
    t = (t - l.kernel) / l.stride + 1;
  }
  return t;
}

std::int64_t featurizer_receptive_field(const std::vector<ConvLayerSpec>& layers) {
  std::int64_t field = 1, jump = 1;
  for (const auto& l : layers) {
    field += (l.kernel - 1) * jump;
    jump *= l.stride;
  }
  return field;
}

namespace {

struct Grid {
  std::int64_t padded_h = 0, padded_w = 0;  // pixels after padding
  std::int64_t rows = 0, cols = 0;          // patches
};

Grid image_grid(const ModelConfig& c, std::int64_t h, std::int64_t w) {
  Grid g;
  const std::int64_t multiple = c.pad_multiple.value_or(1);
  g.padded_h = pad_input(pad_input(h, multiple), c.patch_size);
  g.padded_w = pad_input(pad_input(w, multiple), c.patch_size);
  g.rows = g.padded_h / c.patch_size;
  g.cols = g.padded_w / c.patch_size;
  return g;
}

SequenceShape image_shape(const ModelConfig& c, std::int64_t h, std::int64_t w) {
  const Grid g = image_grid(c, h, w);
  const std::int64_t extra = c.family == Family::VisionFull ? 1 : 0;
  return {g.rows * g.cols + extra, g.rows, g.cols};
}

}  // namespace

SequenceShape sequence_shape(const ModelConfig& c, std::int64_t size) {
  switch (c.modality()) {
    case Modality::Text:
      return {pad_input(size, c.pad_multiple.value_or(1)), 0, 0};
    case Modality::Speech:
      return {featurizer_frames(c.featurizer, size), 0, 0};
    case Modality::Vision:
      return image_shape(c, size, size);
  }
  return {};
}

// ---------------------------------------------------------------- model internals

namespace {

constexpr LayerTag kOther0{TagKind::Other, 0};
constexpr LayerTag kEmbed0{TagKind::InputEmbedding, 0};
constexpr LayerTag kPos0{TagKind::PositionalEmbedding, 0};

Tensor weight_norm(const Tensor& v, const Tensor& g, std::vector<float>* norms_out) {
  const std::int64_t taps = v.shape().back(), rows = v.numel() / taps;
  std::vector<float> norms(static_cast<std::size_t>(taps), 0.f);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t k = 0; k < taps; ++k) norms[k] += v[r * taps + k] * v[r * taps + k];
  for (float& n : norms) n = std::sqrt(n);
  Tensor w = Tensor::uninitialized(v.shape());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t k = 0; k < taps; ++k) w[r * taps + k] = g[k] * v[r * taps + k] / norms[k];
  if (norms_out) *norms_out = std::move(norms);
  return w;
}

Tensor pad_image(const Tensor& image, std::int64_t ph, std::int64_t pw) {
  const std::int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (ph == h && pw == w) return image;
  Tensor out = Tensor::zeros({ph, pw, c});
  for (std::int64_t y = 0; y < h; ++y)
    std::memcpy(out.data() + y * pw * c, image.data() + y * w * c, static_cast<std::size_t>(w * c) * sizeof(float));
  return out;
}

// Rows 0, n, 2n, ... of x.
Tensor strided_rows(const Tensor& x, std::int64_t batch, std::int64_t n) {
  const std::int64_t w = x.shape().back();
  Tensor out = Tensor::uninitialized({batch, w});
  for (std::int64_t b = 0; b < batch; ++b)
    std::memcpy(out.data() + b * w, x.data() + b * n * w, static_cast<std::size_t>(w) * sizeof(float));
  return out;
}

Tensor mean_rows(const Tensor& x, std::int64_t batch, std::int64_t n) {
  const std::int64_t w = x.shape().back();
  Tensor out = Tensor::zeros({batch, w});
  for (std::int64_t b = 0; b < batch; ++b) {
    nk::accumulate_column_sums(x.matrix().block(b * n, 0, n, w), {out.data() + b * w, static_cast<std::size_t>(w)});
  }
  nk::scale_inplace(out, 1.f / static_cast<float>(n));
  return out;
}

struct ConvTrace {
  std::vector<Tensor> inputs;   // input of every conv layer
  std::vector<Tensor> pre_act;  // GELU inputs
  Tensor gn_in;
  NormStats gn_stats;
};

struct MergeTrace {
  std::int64_t height = 0, width = 0;  // grid before merging
  Tensor gathered, normed;
  NormStats stats;
};

}  // namespace

class ModelImpl {
 public:
  ModelImpl(const ModelConfig& config, bool with_head, std::uint64_t seed);

  struct Tape {
    std::int64_t batch = 1, tokens = 0;
    // text
    std::vector<std::int32_t> ids, positions;
    Tensor emb_sum;
    NormStats emb_stats;
    // speech
    std::vector<ConvTrace> convs;
    std::int64_t frames = 0;
    Tensor features, feature_normed, projected, pos_weight, pos_pre, enc_sum;
    std::vector<float> pos_norms;
    NormStats feature_stats, enc_stats;
    // vision
    Tensor patches, patch_out;
    NormStats patch_stats;
    std::int64_t grid_rows = 0, grid_cols = 0;
    // encoder
    std::vector<BlockGeometry> geometry;
    std::vector<BlockCache> blocks;
    std::vector<MergeTrace> merges;
    // tail
    Tensor final_in, final_out, cls, pooled;
    NormStats final_stats;
  };

  ForwardOutput run(const ModelInput& input, std::int64_t batch, Tape* tape) const;
  // Accumulates parameter gradients from dL/d(pooled).
  void backward(Tape& tape, const Tensor& grad_pooled) const;
  Tensor logits(const Tensor& pooled) const;
  SequenceShape shape_of(const ModelInput& input) const;

  ModelConfig config;
  bool with_head;
  ParamStore store;

  // text
  Parameter* word = nullptr;
  Parameter* token_type = nullptr;
  Parameter* position = nullptr;
  LayerNorm embed_ln;
  Linear pooler;
  bool has_pooler = false;
  // speech
  std::vector<Parameter*> convs;
  LayerNorm group_norm, feature_ln, encoder_ln;
  Linear feature_proj, final_proj;
  Parameter* pos_v = nullptr;
  Parameter* pos_g = nullptr;
  Parameter* pos_bias = nullptr;
  // vision
  Linear patch_embed;
  Parameter* cls = nullptr;
  LayerNorm patch_ln, final_ln;
  struct Merge {
    int layer = 0;
    LayerNorm ln;
    Linear reduction;
  };
  std::vector<Merge> merges;

  std::vector<Block> blocks;
  std::vector<std::int64_t> block_stage;
  Linear head;
  std::int64_t pooled_width = 0;

 private:
  Tensor embed_text(const TokenInput& in, std::int64_t batch, Tape* tape, std::int64_t& tokens) const;
  Tensor embed_speech(const WaveformInput& in, std::int64_t batch, Tape* tape, std::int64_t& tokens) const;
  Tensor embed_vit(const ImageInput& in, std::int64_t batch, Tape* tape, std::int64_t& tokens) const;
  Tensor embed_swin(const ImageInput& in, std::int64_t batch, Tape* tape, std::int64_t& rows,
                    std::int64_t& cols) const;
  Tensor run_swin_stages(Tensor x, std::int64_t batch, std::int64_t rows, std::int64_t cols, Tape* tape,
                         std::int64_t& tokens) const;
  BlockGeometry sequence_geometry(std::int64_t batch, std::int64_t n) const;
  BlockGeometry window_geometry(std::int64_t batch, std::int64_t h, std::int64_t w, std::int64_t width,
                                std::int64_t heads, bool odd) const;

  Tensor merge_forward(const Merge& m, const Tensor& x, std::int64_t batch, std::int64_t h, std::int64_t w,
                       MergeTrace* trace) const;
  Tensor merge_backward(const Merge& m, MergeTrace& trace, std::int64_t batch, const Tensor& grad) const;

  void backward_text(Tape& tape, const Tensor& grad) const;
  void backward_speech(Tape& tape, const Tensor& grad) const;
  void backward_vit(Tape& tape, const Tensor& grad) const;
  void backward_swin(Tape& tape, const Tensor& grad) const;
};

ModelImpl::ModelImpl(const ModelConfig& c, bool head_requested, std::uint64_t seed)
    : config(c), with_head(head_requested), store(seed) {
  validate(config);
  const std::int64_t d = c.d_model;
  const float eps = c.layer_norm_eps;
  pooled_width = d;

  switch (c.modality()) {
    case Modality::Text:
      word = store.normal("embeddings.word_embeddings", kEmbed0, {c.vocab_size, d});
      token_type = store.normal("embeddings.token_type_embeddings", kEmbed0, {c.type_vocab_size, d});
      position = store.normal("embeddings.position_embeddings", kPos0, {c.max_positions, d});
      embed_ln = LayerNorm::make(store, "embeddings.layernorm", kOther0, d, eps);
      break;
    case Modality::Speech: {
      std::int64_t in = 1;
      for (std::size_t i = 0; i < c.featurizer.size(); ++i) {
        const auto& l = c.featurizer[i];
        convs.push_back(store.normal("feature_extractor.conv_layers." + std::to_string(i) + ".conv.weight",
                                     {TagKind::InputEmbedding, static_cast<int>(i)}, {l.channels, in, l.kernel},
                                     std::sqrt(2.f / static_cast<float>(in * l.kernel))));
        in = l.channels;
      }
      group_norm = LayerNorm::make(store, "feature_extractor.conv_layers.0.layer_norm", kOther0,
                                   c.featurizer.front().channels, eps);
      feature_ln = LayerNorm::make(store, "feature_projection.layer_norm", kOther0, in, eps);
      feature_proj = Linear::make(store, "feature_projection.projection", kPos0, in, d);
      const std::int64_t k = c.pos_conv_kernel;
      pos_v = store.normal("encoder.pos_conv_embed.conv.weight_v", kPos0, {d, d / c.pos_conv_groups, k},
                         std::sqrt(4.f / static_cast<float>(k * (d / c.pos_conv_groups))));
      std::vector<float> norms;
      {
        Tensor ones = Tensor::full({k}, 1.f);
        weight_norm(pos_v->value, ones, &norms);
      }
      pos_g = store.constant("encoder.pos_conv_embed.conv.weight_g", kPos0, {k}, 0.f);
      for (std::int64_t i = 0; i < k; ++i) pos_g->value[i] = norms[static_cast<std::size_t>(i)];
      pos_bias = store.constant("encoder.pos_conv_embed.conv.bias", kPos0, {d}, 0.f);
      encoder_ln = LayerNorm::make(store, "encoder.layer_norm", kOther0, d, eps);
      break;
    }
    case Modality::Vision: {
      const std::int64_t patch_in = c.patch_size * c.patch_size * c.image_channels;
      if (c.family == Family::VisionFull) {
        patch_embed = Linear::make(store, "embeddings.patch_embeddings.projection", kEmbed0, patch_in, d);
        cls = store.normal("embeddings.cls_token", kEmbed0, {1, d});
        position = store.normal("embeddings.position_embeddings", kPos0, {c.max_positions, d});
      } else {
        patch_embed = Linear::make(store, "embeddings.patch_embeddings.projection", kEmbed0, patch_in, d);
        patch_ln = LayerNorm::make(store, "embeddings.norm", kOther0, d, eps);
      }
      break;
    }
  }

  if (c.family == Family::VisionShiftedWindow) {
    const std::int64_t ratio = c.d_ff / c.d_model;
    std::int64_t width = d;
    int layer = 0;
    for (std::size_t s = 0; s < c.stage_depths.size(); ++s) {
      for (std::int64_t j = 0; j < c.stage_depths[s]; ++j, ++layer) {
        blocks.push_back(Block::make(store, c, layer, width, c.stage_heads[s], ratio * width));
        block_stage.push_back(static_cast<std::int64_t>(s));
      }
      if (s + 1 < c.stage_depths.size()) {
        Merge m;
        m.layer = layer - 1;
        const LayerTag tag{TagKind::Other, m.layer};
        const std::string name = "encoder.layers." + std::to_string(s) + ".downsample";
        m.ln = LayerNorm::make(store, name + ".norm", tag, 4 * width, eps);
        m.reduction = Linear::make(store, name + ".reduction", tag, 4 * width, 2 * width, false);
        merges.push_back(std::move(m));
        width *= 2;
      }
    }
    final_ln = LayerNorm::make(store, "layernorm", kOther0, width, eps);
    pooled_width = width;
  } else {
    for (int l = 0; l < c.n_layers; ++l) blocks.push_back(Block::make(store, c, l, d, c.n_heads, c.d_ff));
  }

  if (c.family == Family::VisionFull) final_ln = LayerNorm::make(store, "layernorm", kOther0, d, eps);
  if (c.modality() == Modality::Speech) {
    final_proj = Linear::make(store, "final_proj", kOther0, d, c.final_proj_dim);
    pooled_width = c.final_proj_dim;
  }
  has_pooler = c.pooler && (c.modality() == Modality::Text || c.family == Family::VisionFull);
  if (has_pooler) pooler = Linear::make(store, "pooler.dense", kOther0, d, d);
  if (with_head) head = Linear::make(store, "classifier", kOther0, pooled_width, 2);
}

SequenceShape ModelImpl::shape_of(const ModelInput& input) const {
  if (input_modality(input) != config.modality()) {
    throw ConfigError(config.name + " expects " + std::string(modality_name(config.modality())) + " input, got " +
                      std::string(modality_name(input_modality(input))));
  }
  if (const auto* t = std::get_if<TokenInput>(&input)) return sequence_shape(config, static_cast<std::int64_t>(t->ids.size()));
  if (const auto* w = std::get_if<WaveformInput>(&input)) return sequence_shape(config, w->samples.numel());
  const auto& px = std::get<ImageInput>(input).pixels;
  if (px.rank() != 3 || px.dim(2) != config.image_channels) {
    throw DimensionError("image input must be [H x W x " + std::to_string(config.image_channels) + "], got " +
                         nk::shape_string(px.shape()));
  }
  return image_shape(config, px.dim(0), px.dim(1));
}

BlockGeometry ModelImpl::sequence_geometry(std::int64_t batch, std::int64_t n) const {
  BlockGeometry g;
  g.layout = {batch, n, config.n_heads, config.head_dim()};
  if (config.attention() == AttentionKind::SlidingWindow) {
    g.sliding = {*config.attention_window / 2, config.global_tokens};
  } else if (config.attention() == AttentionKind::Nystrom) {
    g.landmarks = std::min(config.n_landmarks, n);
    g.pinv_iterations = config.pinv_iterations;
  }
  return g;
}

BlockGeometry ModelImpl::window_geometry(std::int64_t batch, std::int64_t h, std::int64_t w, std::int64_t width,
                                         std::int64_t heads, bool odd) const {
  BlockGeometry g;
  const std::int64_t res = std::min(h, w);
  g.window = std::min(config.swin_window, res);
  g.shift = odd && res > config.swin_window ? g.window / 2 : 0;
  g.height = h;
  g.width = w;
  g.padded_h = pad_input(h, g.window);
  g.padded_w = pad_input(w, g.window);
  g.layout = {batch, g.padded_h * g.padded_w, heads, width / heads};
  return g;
}

// ---------------------------------------------------------------- embedders

Tensor ModelImpl::embed_text(const TokenInput& in, std::int64_t batch, Tape* tape, std::int64_t& tokens) const {
  const std::int64_t n0 = static_cast<std::int64_t>(in.ids.size());
  if (n0 == 0) throw TooShortError(config.name + ": empty token sequence");
  const std::int64_t n = sequence_shape(config, n0).tokens;
  const std::int64_t d = config.d_model;
  tokens = n;

  std::vector<std::int32_t> ids(static_cast<std::size_t>(batch * n), 1), positions(ids.size());
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t i = 0; i < n; ++i) {
      const auto at = static_cast<std::size_t>(b * n + i);
      if (i < n0) ids[at] = in.ids[static_cast<std::size_t>(i)];
      positions[at] = static_cast<std::int32_t>(i % config.max_positions);
    }

  Tensor x;
  {
    ScopedTag scope(kEmbed0);
    x = nk::embedding_lookup(word->value, ids);
    nk::add_row_bias(x.matrix(), {token_type->value.data(), static_cast<std::size_t>(d)});
  }
  {
    ScopedTag scope(kPos0);
    Tensor pos = nk::embedding_lookup(position->value, positions);
    nk::add_inplace(x, pos);
  }
  ScopedTag scope(kOther0);
  Tensor y = embed_ln.forward(x, tape ? &tape->emb_stats : nullptr);
  if (tape) {
    tape->ids = std::move(ids);
    tape->positions = std::move(positions);
    tape->emb_sum = std::move(x);
  }
  return y;
}

Tensor ModelImpl::embed_speech(const WaveformInput& in, std::int64_t batch, Tape* tape, std::int64_t& tokens) const {
  const std::int64_t samples = in.samples.numel();
  const std::int64_t frames = featurizer_frames(config.featurizer, samples);
  if (frames < 1) {
    throw TooShortError(config.name + ": " + std::to_string(samples) + " samples is shorter than the featurizer's " +
                        std::to_string(featurizer_receptive_field(config.featurizer)) + "-sample receptive field");
  }
  tokens = frames;
  const std::int64_t channels = config.featurizer.back().channels, d = config.d_model;
  if (tape) tape->convs.resize(static_cast<std::size_t>(batch));

  Tensor features;
  {
    ScopedTag scope(kOther0);
    features = Tensor::uninitialized({batch * frames, channels});
  }
  for (std::int64_t b = 0; b < batch; ++b) {
    ConvTrace* trace = tape ? &tape->convs[static_cast<std::size_t>(b)] : nullptr;
    Tensor x;
    {
      ScopedTag scope(kEmbed0);
      x = Tensor::from_values({1, samples}, in.samples.values());
    }
    for (std::size_t i = 0; i < convs.size(); ++i) {
      Tensor y;
      {
        ScopedTag scope({TagKind::InputEmbedding, static_cast<int>(i)});
        y = nk::conv1d(x, convs[i]->value, {}, {config.featurizer[i].stride, 0, 1});
      }
      ScopedTag scope(kOther0);
      if (i == 0) {
        Tensor normed = group_norm.forward_channels(y, trace ? &trace->gn_stats : nullptr);
        if (trace) trace->gn_in = std::move(y);
        y = std::move(normed);
      }
      Tensor a = nk::gelu(y);
      if (trace) {
        trace->inputs.push_back(std::move(x));
        trace->pre_act.push_back(std::move(y));
      }
      x = std::move(a);
    }
    ScopedTag scope(kOther0);
    nk::transpose_into(x.matrix(), features.matrix().block(b * frames, 0, frames, channels));
  }

  Tensor normed, h;
  {
    ScopedTag scope(kOther0);
    normed = feature_ln.forward(features, tape ? &tape->feature_stats : nullptr);
    if (!tape) features = Tensor();
  }
  Tensor pre;
  {
    ScopedTag scope(kPos0);
    h = feature_proj.forward(normed);
    if (!tape) normed = Tensor();
    std::vector<float> norms;
    Tensor weight = weight_norm(pos_v->value, pos_g->value, &norms);
    const nk::Conv1dParams p{1, config.pos_conv_kernel / 2, config.pos_conv_groups};
    pre = Tensor::uninitialized({batch * frames, d});
    for (std::int64_t b = 0; b < batch; ++b) {
      Tensor xt = Tensor::uninitialized({d, frames});
      nk::transpose_into(h.matrix().block(b * frames, 0, frames, d), xt.matrix());
      Tensor y = nk::conv1d(xt, weight, pos_bias->value.values(), p);
      nk::transpose_into(y.matrix().block(0, 0, d, frames), pre.matrix().block(b * frames, 0, frames, d));
    }
    if (tape) {
      tape->pos_weight = std::move(weight);
      tape->pos_norms = std::move(norms);
    }
  }
  ScopedTag scope(kOther0);
  Tensor sum = nk::gelu(pre);
  nk::add_inplace(sum, h);
  Tensor out = encoder_ln.forward(sum, tape ? &tape->enc_stats : nullptr);
  if (tape) {
    tape->frames = frames;
    tape->features = std::move(features);
    tape->feature_normed = std::move(normed);
    tape->projected = std::move(h);
    tape->pos_pre = std::move(pre);
    tape->enc_sum = std::move(sum);
  }
  return out;
}

Tensor ModelImpl::embed_vit(const ImageInput& in, std::int64_t batch, Tape* tape, std::int64_t& tokens) const {
  const Grid g = image_grid(config, in.pixels.dim(0), in.pixels.dim(1));
  const std::int64_t patches = g.rows * g.cols, n = patches + 1, d = config.d_model;
  tokens = n;
  Tensor x;
  {
    ScopedTag scope(kEmbed0);
    Tensor p;
    {
      Tensor one = nk::patchify(pad_image(in.pixels, g.padded_h, g.padded_w), config.patch_size);
      p = Tensor::uninitialized({batch * patches, one.dim(1)});
      for (std::int64_t b = 0; b < batch; ++b)
        std::memcpy(p.data() + b * one.numel(), one.data(), one.bytes());
    }
    Tensor e = patch_embed.forward(p);
    x = Tensor::uninitialized({batch * n, d});
    const auto row_bytes = static_cast<std::size_t>(d) * sizeof(float);
    for (std::int64_t b = 0; b < batch; ++b) {
      std::memcpy(x.data() + b * n * d, cls->value.data(), row_bytes);
      std::memcpy(x.data() + (b * n + 1) * d, e.data() + b * patches * d, row_bytes * static_cast<std::size_t>(patches));
    }
    if (tape) tape->patches = std::move(p);
  }
  ScopedTag scope(kPos0);
  const std::int64_t table = config.max_positions;
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t i = 0; i < n; ++i) {
      float* row = x.data() + (b * n + i) * d;
      const float* pos = position->value.data() + (i % table) * d;
      for (std::int64_t j = 0; j < d; ++j) row[j] += pos[j];
    }
  return x;
}

Tensor ModelImpl::embed_swin(const ImageInput& in, std::int64_t batch, Tape* tape, std::int64_t& rows,
                             std::int64_t& cols) const {
  const Grid g = image_grid(config, in.pixels.dim(0), in.pixels.dim(1));
  rows = g.rows;
  cols = g.cols;
  Tensor e;
  {
    ScopedTag scope(kEmbed0);
    Tensor p;
    {
      Tensor one = nk::patchify(pad_image(in.pixels, g.padded_h, g.padded_w), config.patch_size);
      p = Tensor::uninitialized({batch * one.dim(0), one.dim(1)});
      for (std::int64_t b = 0; b < batch; ++b)
        std::memcpy(p.data() + b * one.numel(), one.data(), one.bytes());
    }
    e = patch_embed.forward(p);
    if (tape) tape->patches = std::move(p);
  }
  ScopedTag scope(kOther0);
  Tensor x = patch_ln.forward(e, tape ? &tape->patch_stats : nullptr);
  if (tape) tape->patch_out = std::move(e);
  return x;
}

// ---------------------------------------------------------------- patch merging

Tensor ModelImpl::merge_forward(const Merge& m, const Tensor& x, std::int64_t batch, std::int64_t h, std::int64_t w,
                                MergeTrace* trace) const {
  ScopedTag scope({TagKind::Other, m.layer});
  const std::int64_t c = x.shape().back();
  const std::int64_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  Tensor gathered = Tensor::zeros({batch * oh * ow, 4 * c});
  const auto row_bytes = static_cast<std::size_t>(c) * sizeof(float);
  // channel blocks: (0,0), (1,0), (0,1), (1,1) as (row, column) offsets
  static constexpr std::int64_t kDy[4] = {0, 1, 0, 1}, kDx[4] = {0, 0, 1, 1};
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx)
        for (int part = 0; part < 4; ++part) {
          const std::int64_t sy = 2 * y + kDy[part], sx = 2 * xx + kDx[part];
          if (sy >= h || sx >= w) continue;
          std::memcpy(gathered.data() + ((b * oh + y) * ow + xx) * 4 * c + part * c,
                      x.data() + ((b * h + sy) * w + sx) * c, row_bytes);
        }
  Tensor normed = m.ln.forward(gathered, trace ? &trace->stats : nullptr);
  if (!trace) gathered = Tensor();
  Tensor out = m.reduction.forward(normed);
  if (trace) {
    trace->height = h;
    trace->width = w;
    trace->gathered = std::move(gathered);
    trace->normed = std::move(normed);
  }
  return out;
}

Tensor ModelImpl::merge_backward(const Merge& m, MergeTrace& t, std::int64_t batch, const Tensor& grad) const {
  ScopedTag scope({TagKind::Other, m.layer});
  Tensor gn = m.reduction.backward(t.normed, grad);
  Tensor gg = m.ln.backward(t.gathered, t.stats, gn);
  const std::int64_t c = gg.shape().back() / 4, h = t.height, w = t.width;
  const std::int64_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  Tensor gx = Tensor::uninitialized({batch * h * w, c});
  static constexpr std::int64_t kDy[4] = {0, 1, 0, 1}, kDx[4] = {0, 0, 1, 1};
  const auto row_bytes = static_cast<std::size_t>(c) * sizeof(float);
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx)
        for (int part = 0; part < 4; ++part) {
          const std::int64_t sy = 2 * y + kDy[part], sx = 2 * xx + kDx[part];
          if (sy >= h || sx >= w) continue;
          std::memcpy(gx.data() + ((b * h + sy) * w + sx) * c, gg.data() + ((b * oh + y) * ow + xx) * 4 * c + part * c,
                      row_bytes);
        }
  return gx;
}

Tensor ModelImpl::run_swin_stages(Tensor x, std::int64_t batch, std::int64_t rows, std::int64_t cols, Tape* tape,
                                  std::int64_t& tokens) const {
  std::int64_t width = config.d_model;
  std::size_t bi = 0;
  for (std::size_t s = 0; s < config.stage_depths.size(); ++s) {
    for (std::int64_t j = 0; j < config.stage_depths[s]; ++j, ++bi) {
      BlockGeometry g = window_geometry(batch, rows, cols, width, config.stage_heads[s], j % 2 == 1);
      BlockCache* cache = nullptr;
      if (tape) {
        tape->geometry.push_back(g);
        cache = &tape->blocks.emplace_back();
      }
      x = blocks[bi].forward(std::move(x), g, cache);
    }
    if (s < merges.size()) {
      MergeTrace* trace = tape ? &tape->merges.emplace_back() : nullptr;
      x = merge_forward(merges[s], x, batch, rows, cols, trace);
      rows = (rows + 1) / 2;
      cols = (cols + 1) / 2;
      width *= 2;
    }
  }
  tokens = rows * cols;
  return x;
}

// ---------------------------------------------------------------- forward

ForwardOutput ModelImpl::run(const ModelInput& input, std::int64_t batch, Tape* tape) const {
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  shape_of(input);
  std::int64_t n = 0;
  Tensor x;
  ForwardOutput out;
  if (tape) tape->batch = batch;

  if (config.family == Family::VisionShiftedWindow) {
    std::int64_t rows = 0, cols = 0;
    x = embed_swin(std::get<ImageInput>(input), batch, tape, rows, cols);
    x = run_swin_stages(std::move(x), batch, rows, cols, tape, n);
  } else {
    switch (config.modality()) {
      case Modality::Text: x = embed_text(std::get<TokenInput>(input), batch, tape, n); break;
      case Modality::Speech: x = embed_speech(std::get<WaveformInput>(input), batch, tape, n); break;
      case Modality::Vision: x = embed_vit(std::get<ImageInput>(input), batch, tape, n); break;
    }
    const BlockGeometry g = sequence_geometry(batch, n);
    for (const auto& block : blocks) {
      BlockCache* cache = nullptr;
      if (tape) {
        tape->geometry.push_back(g);
        cache = &tape->blocks.emplace_back();
      }
      x = block.forward(std::move(x), g, cache);
    }
  }
  if (tape) tape->tokens = n;

  ScopedTag scope(kOther0);
  switch (config.family) {
    case Family::TextFull:
    case Family::TextSlidingWindow:
    case Family::TextNystrom:
    case Family::VisionFull: {
      if (config.family == Family::VisionFull) {
        Tensor normed = final_ln.forward(x, tape ? &tape->final_stats : nullptr);
        if (tape) tape->final_in = std::move(x);
        x = std::move(normed);
      }
      out.hidden = std::move(x);
      Tensor first = strided_rows(out.hidden, batch, n);
      if (has_pooler) {
        out.pooled = nk::tanh_act(pooler.forward(first));
        if (tape) tape->cls = std::move(first);
      } else {
        out.pooled = std::move(first);
      }
      break;
    }
    case Family::SpeechFull:
    case Family::SpeechSlidingWindow:
      out.hidden = final_proj.forward(x);
      out.pooled = mean_rows(out.hidden, batch, n);
      if (tape) tape->final_in = std::move(x);
      break;
    case Family::VisionShiftedWindow:
      out.hidden = final_ln.forward(x, tape ? &tape->final_stats : nullptr);
      out.pooled = mean_rows(out.hidden, batch, n);
      if (tape) tape->final_in = std::move(x);
      break;
  }
  if (tape) tape->pooled = out.pooled;
  return out;
}

Tensor ModelImpl::logits(const Tensor& pooled) const {
  ScopedTag scope(kOther0);
  return head.forward(pooled);
}

// ---------------------------------------------------------------- backward

void ModelImpl::backward(Tape& tape, const Tensor& grad_pooled) const {
  const std::int64_t batch = tape.batch, n = tape.tokens;
  Tensor g;
  {
    ScopedTag scope(kOther0);
    switch (config.family) {
      case Family::TextFull:
      case Family::TextSlidingWindow:
      case Family::TextNystrom:
      case Family::VisionFull: {
        const std::int64_t d = config.d_model;
        Tensor gfirst;
        if (has_pooler) {
          gfirst = pooler.backward(tape.cls, nk::tanh_backward(tape.pooled, grad_pooled));
        } else {
          gfirst = grad_pooled;
        }
        g = Tensor::zeros({batch * n, d});
        for (std::int64_t b = 0; b < batch; ++b)
          std::memcpy(g.data() + b * n * d, gfirst.data() + b * d, static_cast<std::size_t>(d) * sizeof(float));
        if (config.family == Family::VisionFull) g = final_ln.backward(tape.final_in, tape.final_stats, g);
        break;
      }
      case Family::SpeechFull:
      case Family::SpeechSlidingWindow:
      case Family::VisionShiftedWindow: {
        const std::int64_t w = grad_pooled.dim(1);
        Tensor gh = Tensor::uninitialized({batch * n, w});
        const float inv = 1.f / static_cast<float>(n);
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < w; ++j) gh[(b * n + i) * w + j] = grad_pooled[b * w + j] * inv;
        if (config.family == Family::VisionShiftedWindow) {
          g = final_ln.backward(tape.final_in, tape.final_stats, gh);
        } else {
          g = final_proj.backward(tape.final_in, gh);
        }
        break;
      }
    }
  }

  if (config.family == Family::VisionShiftedWindow) {
    backward_swin(tape, g);
    return;
  }
  for (std::size_t i = blocks.size(); i-- > 0;) {
    g = blocks[i].backward(tape.geometry[i], tape.blocks[i], g);
    tape.blocks[i] = BlockCache();
  }
  switch (config.modality()) {
    case Modality::Text: backward_text(tape, g); break;
    case Modality::Speech: backward_speech(tape, g); break;
    case Modality::Vision: backward_vit(tape, g); break;
  }
}

void ModelImpl::backward_text(Tape& tape, const Tensor& grad) const {
  Tensor g;
  {
    ScopedTag scope(kOther0);
    g = embed_ln.backward(tape.emb_sum, tape.emb_stats, grad);
  }
  {
    ScopedTag scope(kPos0);
    nk::embedding_backward(g, tape.positions, grad_of(*position));
  }
  ScopedTag scope(kEmbed0);
  nk::embedding_backward(g, tape.ids, grad_of(*word));
  const std::int64_t d = config.d_model;
  nk::accumulate_column_sums(g.matrix(), {grad_of(*token_type).data(), static_cast<std::size_t>(d)});
}

void ModelImpl::backward_speech(Tape& tape, const Tensor& grad) const {
  const std::int64_t batch = tape.batch, frames = tape.frames, d = config.d_model;
  Tensor gh;
  {
    ScopedTag scope(kOther0);
    Tensor gsum = encoder_ln.backward(tape.enc_sum, tape.enc_stats, grad);
    Tensor gpre = nk::gelu_backward(tape.pos_pre, gsum);
    gh = std::move(gsum);
    ScopedTag pos(kPos0);
    const nk::Conv1dParams p{1, config.pos_conv_kernel / 2, config.pos_conv_groups};
    Tensor gw = Tensor::zeros(tape.pos_weight.shape());
    for (std::int64_t b = 0; b < batch; ++b) {
      Tensor xt = Tensor::uninitialized({d, frames});
      nk::transpose_into(tape.projected.matrix().block(b * frames, 0, frames, d), xt.matrix());
      const std::int64_t out_len = nk::conv1d_output_length(frames, config.pos_conv_kernel, p);
      Tensor gy = Tensor::zeros({d, out_len});
      nk::transpose_into(gpre.matrix().block(b * frames, 0, frames, d), gy.matrix().block(0, 0, d, frames));
      auto cg = nk::conv1d_backward(xt, tape.pos_weight, gy, p, true);
      nk::add_inplace(gw, cg.grad_weight);
      nk::add_inplace(grad_of(*pos_bias), cg.grad_bias);
      Tensor gxt = nk::transpose(cg.grad_x);
      for (std::int64_t i = 0; i < frames * d; ++i) gh[b * frames * d + i] += gxt[i];
    }
    // weight norm: w = g * v / |v| per tap
    const std::int64_t taps = config.pos_conv_kernel, rows = gw.numel() / taps;
    Tensor& gv = grad_of(*pos_v);
    Tensor& gg = grad_of(*pos_g);
    const Tensor& v = pos_v->value;
    for (std::int64_t k = 0; k < taps; ++k) {
      const float norm = tape.pos_norms[static_cast<std::size_t>(k)], gk = pos_g->value[k];
      double dot = 0.0;
      for (std::int64_t r = 0; r < rows; ++r) dot += static_cast<double>(gw[r * taps + k]) * v[r * taps + k];
      gg[k] += static_cast<float>(dot / norm);
      const float coeff = static_cast<float>(gk * dot / (static_cast<double>(norm) * norm * norm));
      for (std::int64_t r = 0; r < rows; ++r) gv[r * taps + k] += gk / norm * gw[r * taps + k] - coeff * v[r * taps + k];
    }
  }
  Tensor gnormed;
  {
    ScopedTag scope(kPos0);
    gnormed = feature_proj.backward(tape.feature_normed, gh);
  }
  Tensor gfeat;
  {
    ScopedTag scope(kOther0);
    gfeat = feature_ln.backward(tape.features, tape.feature_stats, gnormed);
  }
  const std::int64_t channels = config.featurizer.back().channels;
  for (std::int64_t b = 0; b < batch; ++b) {
    ConvTrace& trace = tape.convs[static_cast<std::size_t>(b)];
    Tensor ga;
    {
      ScopedTag scope(kOther0);
      ga = Tensor::uninitialized({channels, frames});
      nk::transpose_into(gfeat.matrix().block(b * frames, 0, frames, channels), ga.matrix());
    }
    for (std::size_t i = convs.size(); i-- > 0;) {
      Tensor gy;
      {
        ScopedTag scope(kOther0);
        gy = nk::gelu_backward(trace.pre_act[i], ga);
        if (i == 0) gy = group_norm.backward_channels(trace.gn_in, trace.gn_stats, gy);
      }
      ScopedTag scope({TagKind::InputEmbedding, static_cast<int>(i)});
      auto cg = nk::conv1d_backward(trace.inputs[i], convs[i]->value, gy, {config.featurizer[i].stride, 0, 1}, false,
                                    i > 0);
      nk::add_inplace(grad_of(*convs[i]), cg.grad_weight);
      ga = std::move(cg.grad_x);
    }
  }
}

void ModelImpl::backward_vit(Tape& tape, const Tensor& grad) const {
  const std::int64_t batch = tape.batch, n = tape.tokens, d = config.d_model, patches = n - 1;
  {
    ScopedTag scope(kPos0);
    Tensor& gp = grad_of(*position);
    const std::int64_t table = config.max_positions;
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) gp[(i % table) * d + j] += grad[(b * n + i) * d + j];
  }
  ScopedTag scope(kEmbed0);
  Tensor ge = Tensor::uninitialized({batch * patches, d});
  Tensor& gc = grad_of(*cls);
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t j = 0; j < d; ++j) gc[j] += grad[b * n * d + j];
    std::memcpy(ge.data() + b * patches * d, grad.data() + (b * n + 1) * d,
                static_cast<std::size_t>(patches * d) * sizeof(float));
  }
  patch_embed.backward(tape.patches, ge, false);
}

void ModelImpl::backward_swin(Tape& tape, const Tensor& grad) const {
  Tensor g = grad;
  std::size_t bi = blocks.size();
  for (std::size_t s = config.stage_depths.size(); s-- > 0;) {
    if (s < merges.size()) g = merge_backward(merges[s], tape.merges[s], tape.batch, g);
    for (std::int64_t j = 0; j < config.stage_depths[s]; ++j) {
      --bi;
      g = blocks[bi].backward(tape.geometry[bi], tape.blocks[bi], g);
      tape.blocks[bi] = BlockCache();
    }
  }
  Tensor ge;
  {
    ScopedTag scope(kOther0);
    ge = patch_ln.backward(tape.patch_out, tape.patch_stats, g);
  }
  ScopedTag scope(kEmbed0);
  patch_embed.backward(tape.patches, ge, false);
}

// ---------------------------------------------------------------- EncoderModel

EncoderModel::EncoderModel(const ModelConfig& config, bool with_head, std::uint64_t seed)
    : impl_(std::make_unique<ModelImpl>(config, with_head, seed)) {}
EncoderModel::~EncoderModel() = default;
EncoderModel::EncoderModel(EncoderModel&&) noexcept = default;
EncoderModel& EncoderModel::operator=(EncoderModel&&) noexcept = default;

const ModelConfig& EncoderModel::config() const { return impl_->config; }
bool EncoderModel::has_head() const { return impl_->with_head; }

ForwardOutput EncoderModel::forward(const ModelInput& input, std::int64_t batch) const {
  return impl_->run(input, batch, nullptr);
}

SequenceShape EncoderModel::input_shape(const ModelInput& input) const { return impl_->shape_of(input); }

namespace {

// Mean cross-entropy against label 0; fills dL/dlogits when requested.
double cross_entropy(const Tensor& logits, Tensor* grad) {
  const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
  double total = 0.0;
  for (std::int64_t b = 0; b < batch; ++b) {
    double mx = logits[b * classes];
    for (std::int64_t c = 1; c < classes; ++c) mx = std::max<double>(mx, logits[b * classes + c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) z += std::exp(logits[b * classes + c] - mx);
    total += std::log(z) + mx - logits[b * classes];
    if (grad) {
      for (std::int64_t c = 0; c < classes; ++c) {
        const double p = std::exp(logits[b * classes + c] - mx) / z;
        (*grad)[b * classes + c] = static_cast<float>((p - (c == 0 ? 1.0 : 0.0)) / static_cast<double>(batch));
      }
    }
  }
  return total / static_cast<double>(batch);
}

}  // namespace

double EncoderModel::loss(const ModelInput& input, std::int64_t batch) const {
  if (!impl_->with_head) throw ConfigError(impl_->config.name + ": loss needs a classification head");
  ForwardOutput out = impl_->run(input, batch, nullptr);
  return cross_entropy(impl_->logits(out.pooled), nullptr);
}

double EncoderModel::train_step(const ModelInput& input, std::int64_t batch, float learning_rate, bool keep_grads) {
  if (!impl_->with_head) throw ConfigError(impl_->config.name + ": training needs a classification head");
  for (auto& p : impl_->store.all()) p->grad = Tensor();
  double value = 0.0;
  {
    ModelImpl::Tape tape;
    ForwardOutput out = impl_->run(input, batch, &tape);
    out.hidden = Tensor();
    Tensor grad_pooled;
    {
      ScopedTag scope(kOther0);
      Tensor logits = impl_->logits(out.pooled);
      Tensor grad_logits = Tensor::uninitialized(logits.shape());
      value = cross_entropy(logits, &grad_logits);
      grad_pooled = impl_->head.backward(out.pooled, grad_logits);
    }
    impl_->backward(tape, grad_pooled);
  }
  for (auto& p : impl_->store.all()) {
    if (!p->grad.empty()) nk::axpy_inplace(p->value, -learning_rate, p->grad);
    if (!keep_grads) p->grad = Tensor();
  }
  return value;
}

std::vector<const Parameter*> EncoderModel::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : impl_->store.all()) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> EncoderModel::mutable_parameters() {
  std::vector<Parameter*> out;
  for (auto& p : impl_->store.all()) out.push_back(p.get());
  return out;
}

std::int64_t EncoderModel::parameter_bytes() const {
  std::int64_t total = 0;
  for (const auto& p : impl_->store.all()) total += static_cast<std::int64_t>(p->value.bytes());
  return total;
}

}  // namespace attnprof
