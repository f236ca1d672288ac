#include "layers.hpp"

#include <cstring>

#include "attnprof/errors.hpp"

namespace attnprof::detail {

using nk::NormStats;

Parameter* ParamStore::normal(std::string name, LayerTag tag, nk::Shape shape, float stddev) {
  ScopedTag scope(tag);
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->tag = tag;
  p->value = Tensor::uninitialized(std::move(shape));
  std::normal_distribution<float> dist(0.f, stddev);
  for (float& e : p->value.values()) e = dist(rng_);
  params_.push_back(std::move(p));
  return params_.back().get();
}

Parameter* ParamStore::constant(std::string name, LayerTag tag, nk::Shape shape, float value) {
  ScopedTag scope(tag);
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->tag = tag;
  p->value = Tensor::full(std::move(shape), value);
  params_.push_back(std::move(p));
  return params_.back().get();
}

Tensor& grad_of(Parameter& p) {
  if (p.grad.empty()) {
    ScopedTag scope(p.tag);
    p.grad = Tensor::zeros(p.value.shape());
  }
  return p.grad;
}

// ---------------------------------------------------------------- Linear

Linear Linear::make(ParamStore& store, const std::string& name, LayerTag tag, std::int64_t in, std::int64_t out,
                    bool with_bias) {
  Linear l;
  l.weight = store.normal(name + ".weight", tag, {in, out});
  if (with_bias) l.bias = store.constant(name + ".bias", tag, {out}, 0.f);
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  const std::int64_t in = weight->value.dim(0), out = weight->value.dim(1);
  if (x.shape().back() != in) {
    throw DimensionError("linear: input width " + std::to_string(x.shape().back()) + " != " + std::to_string(in));
  }
  Tensor y = Tensor::uninitialized({x.numel() / in, out});
  nk::gemm(x.matrix(), weight->value.matrix(), y.matrix());
  if (bias) nk::add_row_bias(y.matrix(), bias->value.values());
  return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& grad_y, bool need_grad_x) const {
  nk::gemm_tn(x.matrix(), grad_y.matrix(), grad_of(*weight).matrix(), 1.f, 1.f);
  if (bias) nk::accumulate_column_sums(grad_y.matrix(), grad_of(*bias).values());
  if (!need_grad_x) return {};
  Tensor gx = Tensor::uninitialized({grad_y.dim(0), weight->value.dim(0)});
  nk::gemm_nt(grad_y.matrix(), weight->value.matrix(), gx.matrix());
  return gx;
}

// ---------------------------------------------------------------- LayerNorm

LayerNorm LayerNorm::make(ParamStore& store, const std::string& name, LayerTag tag, std::int64_t width, float eps) {
  LayerNorm n;
  n.gamma = store.constant(name + ".weight", tag, {width}, 1.f);
  n.beta = store.constant(name + ".bias", tag, {width}, 0.f);
  n.eps = eps;
  return n;
}

Tensor LayerNorm::forward(const Tensor& x, NormStats* stats) const {
  return nk::layernorm(x, gamma->value.values(), beta->value.values(), eps, stats);
}

namespace {

Tensor take_norm_grads(nk::NormGrads g, Parameter& gamma, Parameter& beta) {
  nk::add_inplace(grad_of(gamma), g.grad_gamma);
  nk::add_inplace(grad_of(beta), g.grad_beta);
  return std::move(g.grad_x);
}

}  // namespace

Tensor LayerNorm::backward(const Tensor& x, const NormStats& stats, const Tensor& grad_y) const {
  return take_norm_grads(nk::layernorm_backward(x, stats, gamma->value.values(), grad_y), *gamma, *beta);
}

Tensor LayerNorm::forward_channels(const Tensor& x, NormStats* stats) const {
  return nk::channel_norm(x, gamma->value.values(), beta->value.values(), eps, stats);
}

Tensor LayerNorm::backward_channels(const Tensor& x, const NormStats& stats, const Tensor& grad_y) const {
  return take_norm_grads(nk::channel_norm_backward(x, stats, gamma->value.values(), grad_y), *gamma, *beta);
}

// ---------------------------------------------------------------- Block

Block Block::make(ParamStore& store, const ModelConfig& c, int index, std::int64_t width, std::int64_t heads,
                  std::int64_t ff) {
  Block b;
  b.index = index;
  b.kind = c.attention();
  const std::string p = "layer." + std::to_string(index) + ".";
  const LayerTag sa{TagKind::SelfAttention, index}, other{TagKind::Other, index};
  b.q = Linear::make(store, p + "attention.query", sa, width, width);
  b.k = Linear::make(store, p + "attention.key", sa, width, width);
  b.v = Linear::make(store, p + "attention.value", sa, width, width);
  if (b.kind == AttentionKind::SlidingWindow && c.global_tokens > 0) {
    b.qg = Linear::make(store, p + "attention.query_global", sa, width, width);
    b.kg = Linear::make(store, p + "attention.key_global", sa, width, width);
    b.vg = Linear::make(store, p + "attention.value_global", sa, width, width);
  }
  if (b.kind == AttentionKind::ShiftedWindow) {
    b.table_window = c.swin_window;
    const std::int64_t side = 2 * c.swin_window - 1;
    b.rel_bias = store.normal(p + "attention.relative_position_bias_table", sa, {side * side, heads});
  }
  b.o = Linear::make(store, p + "attention.output", sa, width, width);
  b.ln1 = LayerNorm::make(store, p + "attention.layernorm", other, width, c.layer_norm_eps);
  b.inter = Linear::make(store, p + "intermediate", {TagKind::Intermediate, index}, width, ff);
  b.out = Linear::make(store, p + "output", {TagKind::Output, index}, ff, width);
  b.ln2 = LayerNorm::make(store, p + "output.layernorm", other, width, c.layer_norm_eps);
  return b;
}

namespace {

// Table rows for relative offsets within `w` taken from a table built for `full`.
Tensor crop_bias(const Tensor& table, std::int64_t full, std::int64_t w) {
  if (w == full) return table;
  const std::int64_t heads = table.dim(1), side = 2 * w - 1, full_side = 2 * full - 1;
  Tensor out = Tensor::uninitialized({side * side, heads});
  for (std::int64_t dy = 0; dy < side; ++dy)
    for (std::int64_t dx = 0; dx < side; ++dx) {
      const std::int64_t src = (dy + full - w) * full_side + (dx + full - w);
      std::memcpy(out.data() + (dy * side + dx) * heads, table.data() + src * heads,
                  static_cast<std::size_t>(heads) * sizeof(float));
    }
  return out;
}

void uncrop_bias_grad(const Tensor& grad, std::int64_t full, std::int64_t w, Tensor& table_grad) {
  const std::int64_t heads = grad.dim(1), side = 2 * w - 1, full_side = 2 * full - 1;
  for (std::int64_t dy = 0; dy < side; ++dy)
    for (std::int64_t dx = 0; dx < side; ++dx) {
      const std::int64_t dst = (dy + full - w) * full_side + (dx + full - w);
      for (std::int64_t h = 0; h < heads; ++h) table_grad[dst * heads + h] += grad[(dy * side + dx) * heads + h];
    }
}

Tensor gather_global_rows(const Tensor& x, std::int64_t batch, std::int64_t n, std::int64_t g) {
  const std::int64_t w = x.shape().back();
  Tensor out = Tensor::uninitialized({batch * g, w});
  for (std::int64_t b = 0; b < batch; ++b)
    std::memcpy(out.data() + b * g * w, x.data() + b * n * w, static_cast<std::size_t>(g * w) * sizeof(float));
  return out;
}

void scatter_add_global_rows(const Tensor& grad, std::int64_t batch, std::int64_t n, std::int64_t g, Tensor& out) {
  const std::int64_t w = grad.shape().back();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t i = 0; i < g * w; ++i) out[b * n * w + i] += grad[b * g * w + i];
}

attn::WindowSpec window_spec(const BlockGeometry& g) {
  return {g.layout.batch, g.padded_h, g.padded_w, g.window, g.shift, g.layout.heads, g.layout.head_dim};
}

}  // namespace

Tensor Block::forward(Tensor x, const BlockGeometry& g, BlockCache* cache) const {
  const auto& l = g.layout;
  Tensor a;
  {
    ScopedTag scope({TagKind::SelfAttention, index});
    Tensor rolled;
    if (kind == AttentionKind::ShiftedWindow) {
      rolled = attn::roll_pad(x, l.batch, g.height, g.width, g.padded_h, g.padded_w, g.shift);
    }
    const Tensor& src = kind == AttentionKind::ShiftedWindow ? rolled : x;
    Tensor qt = q.forward(src), kt = k.forward(src), vt = v.forward(src);
    Tensor ctx, xg, qgt, kgt, vgt, bias;
    switch (kind) {
      case AttentionKind::Full:
        ctx = attn::full_forward(qt, kt, vt, l, cache ? &cache->full : nullptr);
        break;
      case AttentionKind::SlidingWindow: {
        attn::GlobalQkv global;
        const std::int64_t ng = std::min(g.sliding.globals, l.length);
        if (ng > 0) {
          xg = gather_global_rows(x, l.batch, l.length, ng);
          qgt = qg.forward(xg);
          kgt = kg.forward(x);
          vgt = vg.forward(x);
          global = {&qgt, &kgt, &vgt};
        }
        ctx = attn::sliding_forward(qt, kt, vt, l, g.sliding, global, cache ? &cache->sliding : nullptr);
        break;
      }
      case AttentionKind::Nystrom:
        ctx = attn::nystrom_forward(qt, kt, vt, l, g.landmarks, g.pinv_iterations, cache ? &cache->nystrom : nullptr);
        break;
      case AttentionKind::ShiftedWindow:
        bias = crop_bias(rel_bias->value, table_window, g.window);
        ctx = attn::window_forward(qt, kt, vt, window_spec(g), &bias, cache ? &cache->window : nullptr);
        break;
    }
    a = o.forward(ctx);
    if (kind == AttentionKind::ShiftedWindow) {
      a = attn::unroll_crop(a, l.batch, g.height, g.width, g.padded_h, g.padded_w, g.shift);
    }
    if (cache) {
      cache->src = std::move(rolled);
      cache->q = std::move(qt);
      cache->k = std::move(kt);
      cache->v = std::move(vt);
      cache->ctx = std::move(ctx);
      cache->xg = std::move(xg);
      cache->qg = std::move(qgt);
      cache->kg = std::move(kgt);
      cache->vg = std::move(vgt);
      cache->bias = std::move(bias);
    }
  }

  Tensor h;
  {
    ScopedTag scope({TagKind::Other, index});
    nk::add_inplace(a, x);
    h = ln1.forward(a, cache ? &cache->st1 : nullptr);
    if (cache) {
      cache->x = std::move(x);
      cache->s1 = std::move(a);
    } else {
      x = Tensor();
      a = Tensor();
    }
  }
  Tensor u;
  {
    ScopedTag scope({TagKind::Intermediate, index});
    u = inter.forward(h);
  }
  Tensor act;
  {
    ScopedTag scope({TagKind::Other, index});
    act = nk::gelu(u);
    if (cache) cache->u = std::move(u);
    else u = Tensor();
  }
  Tensor s2;
  {
    ScopedTag scope({TagKind::Output, index});
    s2 = out.forward(act);
    if (cache) cache->act = std::move(act);
    else act = Tensor();
  }
  ScopedTag scope({TagKind::Other, index});
  nk::add_inplace(s2, h);
  Tensor y = ln2.forward(s2, cache ? &cache->st2 : nullptr);
  if (cache) {
    cache->h = std::move(h);
    cache->s2 = std::move(s2);
  }
  return y;
}

Tensor Block::backward(const BlockGeometry& g, BlockCache& c, const Tensor& grad_y) const {
  const auto& l = g.layout;
  Tensor gs2;
  {
    ScopedTag scope({TagKind::Other, index});
    gs2 = ln2.backward(c.s2, c.st2, grad_y);
  }
  Tensor gact;
  {
    ScopedTag scope({TagKind::Output, index});
    gact = out.backward(c.act, gs2);
  }
  Tensor gu;
  {
    ScopedTag scope({TagKind::Other, index});
    gu = nk::gelu_backward(c.u, gact);
  }
  Tensor gh;
  {
    ScopedTag scope({TagKind::Intermediate, index});
    gh = inter.backward(c.h, gu);
    nk::add_inplace(gh, gs2);
  }
  Tensor gs1;
  {
    ScopedTag scope({TagKind::Other, index});
    gs1 = ln1.backward(c.s1, c.st1, gh);
  }

  ScopedTag scope({TagKind::SelfAttention, index});
  Tensor ga;
  if (kind == AttentionKind::ShiftedWindow) {
    ga = attn::roll_pad(gs1, l.batch, g.height, g.width, g.padded_h, g.padded_w, g.shift);
  }
  const Tensor& gout = kind == AttentionKind::ShiftedWindow ? ga : gs1;
  const Tensor& src = kind == AttentionKind::ShiftedWindow ? c.src : c.x;
  Tensor gctx = o.backward(c.ctx, gout);

  attn::QkvGrads gq;
  Tensor gsrc;
  switch (kind) {
    case AttentionKind::Full:
      gq = attn::full_backward(c.q, c.k, c.v, l, c.full, gctx);
      break;
    case AttentionKind::SlidingWindow: {
      const std::int64_t ng = std::min(g.sliding.globals, l.length);
      attn::GlobalQkv global;
      if (ng > 0) global = {&c.qg, &c.kg, &c.vg};
      auto sg = attn::sliding_backward(c.q, c.k, c.v, l, g.sliding, global, c.sliding, gctx);
      gq = std::move(sg.local);
      if (ng > 0) {
        gsrc = kg.backward(c.x, sg.global.k);
        nk::add_inplace(gsrc, vg.backward(c.x, sg.global.v));
        scatter_add_global_rows(qg.backward(c.xg, sg.global.q), l.batch, l.length, ng, gsrc);
      }
      break;
    }
    case AttentionKind::Nystrom:
      gq = attn::nystrom_backward(c.q, c.k, c.v, l, g.landmarks, c.nystrom, gctx);
      break;
    case AttentionKind::ShiftedWindow: {
      auto wg = attn::window_backward(c.q, c.k, c.v, window_spec(g), c.window, gctx, true);
      gq = std::move(wg.qkv);
      uncrop_bias_grad(wg.rel_bias, table_window, g.window, grad_of(*rel_bias));
      break;
    }
  }
  Tensor gx = q.backward(src, gq.q);
  nk::add_inplace(gx, k.backward(src, gq.k));
  nk::add_inplace(gx, v.backward(src, gq.v));
  if (!gsrc.empty()) nk::add_inplace(gx, gsrc);
  if (kind == AttentionKind::ShiftedWindow) {
    gx = attn::unroll_crop(gx, l.batch, g.height, g.width, g.padded_h, g.padded_w, g.shift);
  }
  nk::add_inplace(gx, gs1);
  return gx;
}

}  // namespace attnprof::detail
