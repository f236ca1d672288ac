#include "attnprof/modelzoo/params.hpp"

#include "attnprof/errors.hpp"

namespace attnprof {

std::int64_t ParamBreakdown::total() const {
  std::int64_t t = 0;
  for (const auto& [tag, n] : per_tag) t += n;
  return t;
}

std::int64_t ParamBreakdown::of_kind(TagKind kind) const {
  std::int64_t t = 0;
  for (const auto& [tag, n] : per_tag)
    if (tag.kind == kind) t += n;
  return t;
}

std::map<TagKind, std::int64_t> ParamBreakdown::by_kind() const {
  std::map<TagKind, std::int64_t> out;
  for (TagKind k : kAllTagKinds) out[k] = 0;
  for (const auto& [tag, n] : per_tag) out[tag.kind] += n;
  return out;
}

namespace {

std::int64_t linear(std::int64_t in, std::int64_t out, bool bias = true) { return in * out + (bias ? out : 0); }

void add_block(ParamBreakdown& p, int layer, std::int64_t d, std::int64_t ff, std::int64_t attention_extra) {
  p.add({TagKind::SelfAttention, layer}, 4 * linear(d, d) + attention_extra);
  p.add({TagKind::Other, layer}, 2 * 2 * d);
  p.add({TagKind::Intermediate, layer}, linear(d, ff));
  p.add({TagKind::Output, layer}, linear(ff, d));
}

}  // namespace

ParamBreakdown count_params(const ModelConfig& c, bool with_head) {
  validate(c);
  ParamBreakdown p;
  const std::int64_t d = c.d_model;
  const LayerTag emb{TagKind::InputEmbedding, 0}, pos{TagKind::PositionalEmbedding, 0}, other{TagKind::Other, 0};
  std::int64_t head_in = d;

  switch (c.modality()) {
    case Modality::Text: {
      p.add(emb, c.vocab_size * d + c.type_vocab_size * d);
      p.add(pos, c.max_positions * d);
      p.add(other, 2 * d);
      const std::int64_t global = c.global_tokens > 0 ? 3 * linear(d, d) : 0;
      for (int l = 0; l < c.n_layers; ++l) add_block(p, l, d, c.d_ff, global);
      if (c.pooler) p.add(other, linear(d, d));
      break;
    }
    case Modality::Speech: {
      std::int64_t in = 1;
      for (std::size_t i = 0; i < c.featurizer.size(); ++i) {
        const auto& layer = c.featurizer[i];
        p.add({TagKind::InputEmbedding, static_cast<int>(i)}, layer.channels * in * layer.kernel);
        in = layer.channels;
      }
      p.add(other, 2 * c.featurizer.front().channels);  // group norm after the first conv
      p.add(other, 2 * in);                             // feature layer norm
      p.add(pos, linear(in, d));
      p.add(pos, d * (d / c.pos_conv_groups) * c.pos_conv_kernel + c.pos_conv_kernel + d);
      p.add(other, 2 * d);
      for (int l = 0; l < c.n_layers; ++l) add_block(p, l, d, c.d_ff, 0);
      p.add(other, linear(d, c.final_proj_dim));
      head_in = c.final_proj_dim;
      break;
    }
    case Modality::Vision: {
      const std::int64_t patch_in = c.patch_size * c.patch_size * c.image_channels;
      if (c.family == Family::VisionFull) {
        p.add(emb, linear(patch_in, d) + d);
        p.add(pos, c.max_positions * d);
        for (int l = 0; l < c.n_layers; ++l) add_block(p, l, d, c.d_ff, 0);
        p.add(other, 2 * d);
        if (c.pooler) p.add(other, linear(d, d));
      } else {
        p.add(emb, linear(patch_in, d));
        p.add(other, 2 * d);
        const std::int64_t ratio = c.d_ff / c.d_model;
        const std::int64_t table = (2 * c.swin_window - 1) * (2 * c.swin_window - 1);
        std::int64_t width = d;
        int layer = 0;
        for (std::size_t s = 0; s < c.stage_depths.size(); ++s) {
          for (std::int64_t j = 0; j < c.stage_depths[s]; ++j, ++layer)
            add_block(p, layer, width, ratio * width, table * c.stage_heads[s]);
          if (s + 1 < c.stage_depths.size()) {
            p.add({TagKind::Other, layer - 1}, 2 * 4 * width + linear(4 * width, 2 * width, false));
            width *= 2;
          }
        }
        p.add(other, 2 * width);
        head_in = width;
      }
      break;
    }
  }
  if (with_head) p.add(other, linear(head_in, 2));
  return p;
}

}  // namespace attnprof
