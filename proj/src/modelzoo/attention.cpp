#include "attnprof/modelzoo/attention.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "attnprof/errors.hpp"
#include "attnprof/numkernel/counters.hpp"
#include "attnprof/numkernel/kernels.hpp"

namespace attnprof::attn {

using nk::ConstMatrixView;
using nk::MatrixView;

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();
constexpr std::int64_t kQueryBlock = 64;

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& l, const std::string& who) {
  const std::int64_t expect = l.rows() * l.width();
  if (l.batch < 0 || l.length < 0 || l.heads < 1 || l.head_dim < 1) throw ConfigError(who + ": invalid head layout");
  if (q.numel() != expect || k.numel() != expect || v.numel() != expect) {
    throw DimensionError(who + ": q/k/v must hold [batch*length x heads*head_dim] = [" + std::to_string(l.rows()) +
                         " x " + std::to_string(l.width()) + "]");
  }
}

ConstMatrixView head_view(const Tensor& t, const HeadLayout& l, std::int64_t b, std::int64_t h) {
  return {t.data() + b * l.length * l.width() + h * l.head_dim, l.length, l.head_dim, l.width()};
}

MatrixView head_view(Tensor& t, const HeadLayout& l, std::int64_t b, std::int64_t h) {
  return {t.data() + b * l.length * l.width() + h * l.head_dim, l.length, l.head_dim, l.width()};
}

float score_scale(std::int64_t head_dim) { return 1.f / std::sqrt(static_cast<float>(head_dim)); }

std::span<float> row_span(MatrixView m, std::int64_t r) { return {m.row(r), static_cast<std::size_t>(m.cols)}; }

}  // namespace

// ---------------------------------------------------------------- full

Tensor full_forward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& l, FullCache* cache) {
  check_qkv(q, k, v, l, "full attention");
  const std::int64_t n = l.length;
  const float s = score_scale(l.head_dim);
  Tensor probs = Tensor::uninitialized({l.batch * l.heads * n, n});
  Tensor ctx = Tensor::zeros({l.rows(), l.width()});
  if (n == 0 || l.batch == 0) return ctx;
  auto block = [&](std::int64_t b, std::int64_t h) {
    return MatrixView{probs.data() + (b * l.heads + h) * n * n, n, n, n};
  };
  for (std::int64_t b = 0; b < l.batch; ++b)
    for (std::int64_t h = 0; h < l.heads; ++h) nk::gemm_nt(head_view(q, l, b, h), head_view(k, l, b, h), block(b, h), s);
  nk::softmax_rows_inplace(probs.matrix());
  for (std::int64_t b = 0; b < l.batch; ++b)
    for (std::int64_t h = 0; h < l.heads; ++h) nk::gemm(block(b, h), head_view(v, l, b, h), head_view(ctx, l, b, h));
  if (cache) cache->probs = std::move(probs);
  return ctx;
}

QkvGrads full_backward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& l, const FullCache& cache,
                       const Tensor& grad_context) {
  check_qkv(q, k, v, l, "full attention backward");
  const std::int64_t n = l.length;
  const float s = score_scale(l.head_dim);
  QkvGrads g{Tensor::zeros(q.shape()), Tensor::zeros(k.shape()), Tensor::zeros(v.shape())};
  if (n == 0 || l.batch == 0) return g;
  Tensor dp = Tensor::uninitialized({n, n});
  for (std::int64_t b = 0; b < l.batch; ++b)
    for (std::int64_t h = 0; h < l.heads; ++h) {
      ConstMatrixView p{cache.probs.data() + (b * l.heads + h) * n * n, n, n, n};
      ConstMatrixView go = head_view(grad_context, l, b, h);
      nk::gemm_nt(go, head_view(v, l, b, h), dp.matrix());
      nk::gemm_tn(p, go, head_view(g.v, l, b, h));
      nk::softmax_rows_backward_inplace(p, dp.matrix());
      nk::gemm(dp.matrix(), head_view(k, l, b, h), head_view(g.q, l, b, h), s);
      nk::gemm_tn(dp.matrix(), head_view(q, l, b, h), head_view(g.k, l, b, h), s);
    }
  return g;
}

// ---------------------------------------------------------------- sliding window

std::int64_t sliding_row_keys(std::int64_t row, std::int64_t length, const SlidingSpec& spec) {
  const std::int64_t g = std::min(spec.globals, length);
  if (row < g) return 0;
  const std::int64_t lo = std::max(g, row - spec.radius);
  const std::int64_t hi = std::min(length - 1, row + spec.radius);
  return g + std::max<std::int64_t>(0, hi - lo + 1);
}

namespace {

struct BandGeometry {
  std::int64_t n, g, r, width;  // width = g + 2r + 1

  // Dense key range covering every band entry of query rows [i0, i1).
  std::pair<std::int64_t, std::int64_t> key_range(std::int64_t i0, std::int64_t i1) const {
    return {std::max(g, i0 - r), std::min(n, i1 + r)};
  }
};

void check_sliding(const HeadLayout& l, const SlidingSpec& spec, const GlobalQkv& global, std::int64_t g) {
  if (spec.radius < 0 || spec.globals < 0) throw ConfigError("sliding attention: radius and globals must be >= 0");
  if (g == 0) return;
  if (!global.q || !global.k || !global.v) throw ConfigError("sliding attention: global tokens need global projections");
  if (global.q->numel() != l.batch * g * l.width()) throw DimensionError("sliding attention: global queries must be [batch*globals x width]");
  if (global.k->numel() != l.rows() * l.width() || global.v->numel() != l.rows() * l.width()) {
    throw DimensionError("sliding attention: global keys/values must be [batch*length x width]");
  }
}

// Band entry c of row i holds key i - r + c; the dense block scratch covers keys [lo, hi).
void band_to_dense(const BandGeometry& bg, MatrixView band, std::int64_t i0, std::int64_t lo, std::int64_t hi,
                   MatrixView dense) {
  for (std::int64_t t = 0; t < band.rows; ++t) {
    const std::int64_t i = i0 + t;
    const float* src = band.row(t) + bg.g;
    float* dst = dense.row(t);
    for (std::int64_t j = lo; j < hi; ++j) {
      const std::int64_t c = j - (i - bg.r);
      dst[j - lo] = (c >= 0 && c <= 2 * bg.r) ? src[c] : 0.f;
    }
  }
}

void dense_to_band(const BandGeometry& bg, ConstMatrixView dense, std::int64_t i0, std::int64_t lo, std::int64_t hi,
                   MatrixView band, float fill) {
  for (std::int64_t t = 0; t < band.rows; ++t) {
    const std::int64_t i = i0 + t;
    float* dst = band.row(t) + bg.g;
    for (std::int64_t c = 0; c <= 2 * bg.r; ++c) {
      const std::int64_t j = i - bg.r + c;
      dst[c] = (j >= lo && j < hi) ? dense(t, j - lo) : fill;
    }
  }
}

}  // namespace

Tensor sliding_forward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& l, const SlidingSpec& spec,
                       GlobalQkv global, SlidingCache* cache) {
  check_qkv(q, k, v, l, "sliding attention");
  const std::int64_t n = l.length, dh = l.head_dim;
  const std::int64_t g = std::min(spec.globals, n);
  check_sliding(l, spec, global, g);
  const BandGeometry bg{n, g, spec.radius, g + 2 * spec.radius + 1};
  const float s = score_scale(dh);

  Tensor probs = Tensor::uninitialized({l.batch * l.heads * n, bg.width});
  Tensor ctx = Tensor::zeros({l.rows(), l.width()});
  if (n == 0 || l.batch == 0) return ctx;
  Tensor scratch = Tensor::uninitialized({kQueryBlock, kQueryBlock + 2 * bg.r});

  std::int64_t keys_per_head = 0;
  for (std::int64_t i = 0; i < n; ++i) keys_per_head += sliding_row_keys(i, n, spec);

  for (std::int64_t b = 0; b < l.batch; ++b)
    for (std::int64_t h = 0; h < l.heads; ++h) {
      ConstMatrixView qh = head_view(q, l, b, h), kh = head_view(k, l, b, h), vh = head_view(v, l, b, h);
      MatrixView ch = head_view(ctx, l, b, h);
      MatrixView all{probs.data() + (b * l.heads + h) * n * bg.width, n, bg.width, bg.width};
      for (std::int64_t i = 0; i < g; ++i) std::fill_n(all.row(i), bg.width, 0.f);
      for (std::int64_t i0 = g; i0 < n; i0 += kQueryBlock) {
        const std::int64_t i1 = std::min(n, i0 + kQueryBlock), bs = i1 - i0;
        const auto [lo, hi] = bg.key_range(i0, i1);
        MatrixView band = all.block(i0, 0, bs, bg.width);
        ConstMatrixView qb = qh.block(i0, 0, bs, dh);
        MatrixView dense{scratch.data(), bs, hi - lo, hi - lo};
        if (g > 0) nk::gemm_nt_untallied(qb, kh.block(0, 0, g, dh), band.block(0, 0, bs, g), s);
        if (hi > lo) nk::gemm_nt_untallied(qb, kh.block(lo, 0, hi - lo, dh), dense, s);
        dense_to_band(bg, dense, i0, lo, hi, band, kNegInf);
        for (std::int64_t t = 0; t < bs; ++t) nk::softmax_span(row_span(band, t));
        if (hi > lo) {
          band_to_dense(bg, band, i0, lo, hi, dense);
          nk::gemm_untallied(dense, vh.block(lo, 0, hi - lo, dh), ch.block(i0, 0, bs, dh));
        }
        if (g > 0) nk::gemm_untallied(band.block(0, 0, bs, g), vh.block(0, 0, g, dh), ch.block(i0, 0, bs, dh), 1.f, 1.f);
      }
    }
  nk::count_macs(2 * l.batch * l.heads * keys_per_head * dh);
  nk::count_elementwise(l.batch * l.heads * keys_per_head);

  if (g > 0) {
    Tensor gp = Tensor::uninitialized({l.batch * l.heads * g, n});
    auto block = [&](std::int64_t b, std::int64_t h) {
      return MatrixView{gp.data() + (b * l.heads + h) * g * n, g, n, n};
    };
    for (std::int64_t b = 0; b < l.batch; ++b)
      for (std::int64_t h = 0; h < l.heads; ++h) {
        ConstMatrixView qg{global.q->data() + b * g * l.width() + h * dh, g, dh, l.width()};
        nk::gemm_nt(qg, head_view(*global.k, l, b, h), block(b, h), s);
      }
    nk::softmax_rows_inplace(gp.matrix());
    for (std::int64_t b = 0; b < l.batch; ++b)
      for (std::int64_t h = 0; h < l.heads; ++h)
        nk::gemm(block(b, h), head_view(*global.v, l, b, h), head_view(ctx, l, b, h).block(0, 0, g, dh));
    if (cache) cache->global_probs = std::move(gp);
  }
  if (cache) cache->probs = std::move(probs);
  return ctx;
}

SlidingGrads sliding_backward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& l,
                              const SlidingSpec& spec, GlobalQkv global, const SlidingCache& cache,
                              const Tensor& grad_context) {
  check_qkv(q, k, v, l, "sliding attention backward");
  const std::int64_t n = l.length, dh = l.head_dim;
  const std::int64_t g = std::min(spec.globals, n);
  check_sliding(l, spec, global, g);
  const BandGeometry bg{n, g, spec.radius, g + 2 * spec.radius + 1};
  const float s = score_scale(dh);

  SlidingGrads out;
  out.local = {Tensor::zeros(q.shape()), Tensor::zeros(k.shape()), Tensor::zeros(v.shape())};
  if (n == 0 || l.batch == 0) return out;
  Tensor pdense = Tensor::uninitialized({kQueryBlock, kQueryBlock + 2 * bg.r});
  Tensor ddense = Tensor::uninitialized({kQueryBlock, kQueryBlock + 2 * bg.r});
  Tensor dband = Tensor::uninitialized({kQueryBlock, bg.width});

  for (std::int64_t b = 0; b < l.batch; ++b)
    for (std::int64_t h = 0; h < l.heads; ++h) {
      ConstMatrixView qh = head_view(q, l, b, h), kh = head_view(k, l, b, h), vh = head_view(v, l, b, h);
      ConstMatrixView gh = head_view(grad_context, l, b, h);
      MatrixView dq = head_view(out.local.q, l, b, h), dk = head_view(out.local.k, l, b, h),
                 dv = head_view(out.local.v, l, b, h);
      MatrixView all{const_cast<float*>(cache.probs.data()) + (b * l.heads + h) * n * bg.width, n, bg.width, bg.width};
      for (std::int64_t i0 = g; i0 < n; i0 += kQueryBlock) {
        const std::int64_t i1 = std::min(n, i0 + kQueryBlock), bs = i1 - i0;
        const auto [lo, hi] = bg.key_range(i0, i1);
        const std::int64_t span = hi - lo;
        MatrixView band = all.block(i0, 0, bs, bg.width);
        ConstMatrixView qb = qh.block(i0, 0, bs, dh), go = gh.block(i0, 0, bs, dh);
        MatrixView pd{pdense.data(), bs, span, span}, dd{ddense.data(), bs, span, span};
        MatrixView db{dband.data(), bs, bg.width, bg.width};

        if (g > 0) nk::gemm_nt_untallied(go, vh.block(0, 0, g, dh), db.block(0, 0, bs, g));
        if (span > 0) nk::gemm_nt_untallied(go, vh.block(lo, 0, span, dh), dd);
        dense_to_band(bg, dd, i0, lo, hi, db, 0.f);
        for (std::int64_t t = 0; t < bs; ++t) nk::softmax_span_backward(row_span(band, t), row_span(db, t));

        if (span > 0) {
          band_to_dense(bg, band, i0, lo, hi, pd);
          band_to_dense(bg, db, i0, lo, hi, dd);
          nk::gemm_untallied(dd, kh.block(lo, 0, span, dh), dq.block(i0, 0, bs, dh), s, 1.f);
          nk::gemm_tn_untallied(dd, qb, dk.block(lo, 0, span, dh), s, 1.f);
          nk::gemm_tn_untallied(pd, go, dv.block(lo, 0, span, dh), 1.f, 1.f);
        }
        if (g > 0) {
          nk::gemm_untallied(db.block(0, 0, bs, g), kh.block(0, 0, g, dh), dq.block(i0, 0, bs, dh), s, 1.f);
          nk::gemm_tn_untallied(db.block(0, 0, bs, g), qb, dk.block(0, 0, g, dh), s, 1.f);
          nk::gemm_tn_untallied(band.block(0, 0, bs, g), go, dv.block(0, 0, g, dh), 1.f, 1.f);
        }
      }
    }

  if (g > 0) {
    out.global = {Tensor::zeros(global.q->shape()), Tensor::zeros(global.k->shape()), Tensor::zeros(global.v->shape())};
    Tensor dp = Tensor::uninitialized({g, n});
    for (std::int64_t b = 0; b < l.batch; ++b)
      for (std::int64_t h = 0; h < l.heads; ++h) {
        ConstMatrixView p{cache.global_probs.data() + (b * l.heads + h) * g * n, g, n, n};
        ConstMatrixView qg{global.q->data() + b * g * l.width() + h * dh, g, dh, l.width()};
        MatrixView dqg{out.global.q.data() + b * g * l.width() + h * dh, g, dh, l.width()};
        ConstMatrixView go = head_view(grad_context, l, b, h).block(0, 0, g, dh);
        nk::gemm_nt(go, head_view(*global.v, l, b, h), dp.matrix());
        nk::gemm_tn(p, go, head_view(out.global.v, l, b, h));
        nk::softmax_rows_backward_inplace(p, dp.matrix());
        nk::gemm(dp.matrix(), head_view(*global.k, l, b, h), dqg, s);
        nk::gemm_tn(dp.matrix(), qg, head_view(out.global.k, l, b, h), s);
      }
  }
  return out;
}

// ---------------------------------------------------------------- Nystrom

namespace {

void add_scaled_identity(Tensor& x, float diag, float sign) {
  const std::int64_t m = x.dim(0);
  for (float& e : x.values()) e *= sign;
  for (std::int64_t i = 0; i < m; ++i) x[i * m + i] += diag;
}

float pinv_init_scale(const Tensor& a) {
  const std::int64_t m = a.dim(0);
  float max_col = 0.f, max_row = 0.f;
  for (std::int64_t i = 0; i < m; ++i) {
    float row = 0.f, col = 0.f;
    for (std::int64_t j = 0; j < m; ++j) {
      row += a[i * m + j];
      col += a[j * m + i];
    }
    max_row = std::max(max_row, row);
    max_col = std::max(max_col, col);
  }
  if (!(max_row > 0.f && max_col > 0.f)) throw NumericalError("iterative pinv: matrix has no positive row/column sums");
  return 1.f / (max_col * max_row);
}

double identity_residual(const Tensor& a, const Tensor& z) {
  const std::int64_t m = a.dim(0);
  Tensor az = Tensor::uninitialized({m, m});
  nk::gemm_untallied(a.matrix(), z.matrix(), az.matrix());
  double sum = 0.0;
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < m; ++j) {
      const double d = (i == j ? 1.0 : 0.0) - az[i * m + j];
      sum += d * d;
    }
  return std::sqrt(sum);
}

struct PinvStep {
  Tensor x, p, q, r;  // X = A Z, P = 7I - X, Q = 15I - X P, R = 13I - X Q
};

PinvStep pinv_step(const Tensor& a, const Tensor& z) {
  PinvStep st;
  st.x = nk::matmul(a, z);
  st.p = st.x;
  add_scaled_identity(st.p, 7.f, -1.f);
  st.q = nk::matmul(st.x, st.p);
  add_scaled_identity(st.q, 15.f, -1.f);
  st.r = nk::matmul(st.x, st.q);
  add_scaled_identity(st.r, 13.f, -1.f);
  return st;
}

}  // namespace

Tensor iterative_pinv(const Tensor& a, std::int64_t iterations, std::vector<Tensor>* iterates) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw DimensionError("iterative pinv: square matrix required");
  if (iterations < 0) throw ConfigError("iterative pinv: iterations must be >= 0");
  Tensor z = nk::transpose(a);
  nk::scale_inplace(z, pinv_init_scale(a));
  if (iterates) iterates->clear();
  double previous = identity_residual(a, z);
  int growing = 0;
  for (std::int64_t it = 0; it < iterations; ++it) {
    if (iterates) iterates->push_back(z);
    PinvStep st = pinv_step(a, z);
    z = nk::matmul(z, st.r);
    nk::scale_inplace(z, 0.25f);
    const double residual = identity_residual(a, z);
    if (!std::isfinite(residual)) throw NumericalError("iterative pinv: residual is not finite");
    // Growth below the float noise floor of a converged iterate is not divergence.
    const double floor = 1e-4 * std::sqrt(static_cast<double>(a.dim(0)));
    growing = (residual > previous && residual > floor) ? growing + 1 : 0;
    if (growing >= 3) {
      throw NumericalError("iterative pinv diverged: residual grew for 3 consecutive iterations (now " +
                           std::to_string(residual) + ")");
    }
    previous = residual;
  }
  return z;
}

Tensor iterative_pinv_backward(const Tensor& a, const std::vector<Tensor>& iterates, const Tensor& grad_pinv) {
  const std::int64_t m = a.dim(0);
  Tensor da = Tensor::zeros({m, m});
  Tensor g(grad_pinv);
  Tensor at = nk::transpose(a);
  for (auto it = iterates.rbegin(); it != iterates.rend(); ++it) {
    const Tensor& z = *it;
    PinvStep st = pinv_step(a, z);
    // Z' = 0.25 Z R
    Tensor dz = Tensor::uninitialized({m, m});
    nk::gemm_nt(g.matrix(), st.r.matrix(), dz.matrix(), 0.25f);
    Tensor dr = Tensor::uninitialized({m, m});
    nk::gemm_tn(z.matrix(), g.matrix(), dr.matrix(), 0.25f);
    // R = 13I - X Q
    Tensor dx = Tensor::uninitialized({m, m});
    nk::gemm_nt(dr.matrix(), st.q.matrix(), dx.matrix(), -1.f);
    Tensor dq = Tensor::uninitialized({m, m});
    nk::gemm_tn(st.x.matrix(), dr.matrix(), dq.matrix(), -1.f);
    // Q = 15I - X P
    nk::gemm_nt(dq.matrix(), st.p.matrix(), dx.matrix(), -1.f, 1.f);
    Tensor dp = Tensor::uninitialized({m, m});
    nk::gemm_tn(st.x.matrix(), dq.matrix(), dp.matrix(), -1.f);
    // P = 7I - X
    nk::axpy_inplace(dx, -1.f, dp);
    // X = A Z
    nk::gemm_nt(dx.matrix(), z.matrix(), da.matrix(), 1.f, 1.f);
    nk::gemm(at.matrix(), dx.matrix(), dz.matrix(), 1.f, 1.f);
    g = std::move(dz);
  }
  // Z0 = c A^T with c held fixed.
  const float c = pinv_init_scale(a);
  Tensor gt = nk::transpose(g);
  nk::axpy_inplace(da, c, gt);
  return da;
}

Tensor segment_means(ConstMatrixView x, std::int64_t segments) {
  const std::int64_t n = x.rows;
  if (segments < 1 || segments > n) {
    throw ConfigError("segment means: need 1 <= segments <= rows (" + std::to_string(segments) + " vs " +
                      std::to_string(n) + ")");
  }
  Tensor out = Tensor::zeros({segments, x.cols});
  for (std::int64_t j = 0; j < segments; ++j) {
    const std::int64_t lo = j * n / segments, hi = (j + 1) * n / segments;
    float* dst = out.data() + j * x.cols;
    for (std::int64_t i = lo; i < hi; ++i) {
      const float* src = x.row(i);
      for (std::int64_t c = 0; c < x.cols; ++c) dst[c] += src[c];
    }
    const float inv = 1.f / static_cast<float>(hi - lo);
    for (std::int64_t c = 0; c < x.cols; ++c) dst[c] *= inv;
  }
  return out;
}

namespace {

void segment_means_backward(ConstMatrixView grad_means, std::int64_t n, MatrixView grad_x) {
  const std::int64_t m = grad_means.rows;
  for (std::int64_t j = 0; j < m; ++j) {
    const std::int64_t lo = j * n / m, hi = (j + 1) * n / m;
    const float inv = 1.f / static_cast<float>(hi - lo);
    const float* src = grad_means.row(j);
    for (std::int64_t i = lo; i < hi; ++i) {
      float* dst = grad_x.row(i);
      for (std::int64_t c = 0; c < grad_means.cols; ++c) dst[c] += src[c] * inv;
    }
  }
}

}  // namespace

Tensor nystrom_forward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& l, std::int64_t landmarks,
                       std::int64_t pinv_iterations, NystromCache* cache) {
  check_qkv(q, k, v, l, "nystrom attention");
  const std::int64_t n = l.length, dh = l.head_dim, m = landmarks;
  if (m < 1 || m > n) {
    throw ConfigError("nystrom attention: landmarks (" + std::to_string(m) + ") must lie in [1, length=" +
                      std::to_string(n) + "]");
  }
  const float s = score_scale(dh);
  Tensor ctx = Tensor::uninitialized({l.rows(), l.width()});
  if (cache) cache->heads.assign(static_cast<std::size_t>(l.batch * l.heads), {});
  for (std::int64_t b = 0; b < l.batch; ++b)
    for (std::int64_t h = 0; h < l.heads; ++h) {
      ConstMatrixView qh = head_view(q, l, b, h), kh = head_view(k, l, b, h), vh = head_view(v, l, b, h);
      NystromHeadCache hc;
      hc.q_land = segment_means(qh, m);
      hc.k_land = segment_means(kh, m);
      hc.k1 = Tensor::uninitialized({n, m});
      nk::gemm_nt(qh, hc.k_land.matrix(), hc.k1.matrix(), s);
      nk::softmax_rows_inplace(hc.k1.matrix());
      hc.k2 = Tensor::uninitialized({m, m});
      nk::gemm_nt(hc.q_land.matrix(), hc.k_land.matrix(), hc.k2.matrix(), s);
      nk::softmax_rows_inplace(hc.k2.matrix());
      hc.k3 = Tensor::uninitialized({m, n});
      nk::gemm_nt(hc.q_land.matrix(), kh, hc.k3.matrix(), s);
      nk::softmax_rows_inplace(hc.k3.matrix());
      hc.z = iterative_pinv(hc.k2, pinv_iterations, cache ? &hc.z_iterates : nullptr);
      hc.w = Tensor::uninitialized({m, dh});
      nk::gemm(hc.k3.matrix(), vh, hc.w.matrix());
      hc.u = Tensor::uninitialized({m, dh});
      nk::gemm(hc.z.matrix(), hc.w.matrix(), hc.u.matrix());
      nk::gemm(hc.k1.matrix(), hc.u.matrix(), head_view(ctx, l, b, h));
      if (cache) cache->heads[static_cast<std::size_t>(b * l.heads + h)] = std::move(hc);
    }
  return ctx;
}

QkvGrads nystrom_backward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& l,
                          std::int64_t landmarks, const NystromCache& cache, const Tensor& grad_context) {
  check_qkv(q, k, v, l, "nystrom attention backward");
  const std::int64_t n = l.length, dh = l.head_dim, m = landmarks;
  const float s = score_scale(dh);
  QkvGrads g{Tensor::zeros(q.shape()), Tensor::zeros(k.shape()), Tensor::zeros(v.shape())};
  for (std::int64_t b = 0; b < l.batch; ++b)
    for (std::int64_t h = 0; h < l.heads; ++h) {
      const NystromHeadCache& hc = cache.heads.at(static_cast<std::size_t>(b * l.heads + h));
      ConstMatrixView qh = head_view(q, l, b, h), kh = head_view(k, l, b, h), vh = head_view(v, l, b, h);
      ConstMatrixView go = head_view(grad_context, l, b, h);
      MatrixView dq = head_view(g.q, l, b, h), dk = head_view(g.k, l, b, h), dv = head_view(g.v, l, b, h);

      // out = K1 U, U = Z W, W = K3 V
      Tensor dk1 = Tensor::uninitialized({n, m});
      nk::gemm_nt(go, hc.u.matrix(), dk1.matrix());
      Tensor du = Tensor::uninitialized({m, dh});
      nk::gemm_tn(hc.k1.matrix(), go, du.matrix());
      Tensor dz = Tensor::uninitialized({m, m});
      nk::gemm_nt(du.matrix(), hc.w.matrix(), dz.matrix());
      Tensor dw = Tensor::uninitialized({m, dh});
      nk::gemm_tn(hc.z.matrix(), du.matrix(), dw.matrix());
      Tensor dk3 = Tensor::uninitialized({m, n});
      nk::gemm_nt(dw.matrix(), vh, dk3.matrix());
      nk::gemm_tn(hc.k3.matrix(), dw.matrix(), dv);
      Tensor dk2 = iterative_pinv_backward(hc.k2, hc.z_iterates, dz);

      nk::softmax_rows_backward_inplace(hc.k1.matrix(), dk1.matrix());
      nk::softmax_rows_backward_inplace(hc.k2.matrix(), dk2.matrix());
      nk::softmax_rows_backward_inplace(hc.k3.matrix(), dk3.matrix());

      Tensor dql = Tensor::zeros({m, dh});
      Tensor dkl = Tensor::zeros({m, dh});
      // S1 = Q Kl^T, S2 = Ql Kl^T, S3 = Ql K^T (all scaled by s)
      nk::gemm(dk1.matrix(), hc.k_land.matrix(), dq, s, 1.f);
      nk::gemm_tn(dk1.matrix(), qh, dkl.matrix(), s, 1.f);
      nk::gemm(dk2.matrix(), hc.k_land.matrix(), dql.matrix(), s, 1.f);
      nk::gemm_tn(dk2.matrix(), hc.q_land.matrix(), dkl.matrix(), s, 1.f);
      nk::gemm(dk3.matrix(), kh, dql.matrix(), s, 1.f);
      nk::gemm_tn(dk3.matrix(), hc.q_land.matrix(), dk, s, 1.f);
      segment_means_backward(dql.matrix(), n, dq);
      segment_means_backward(dkl.matrix(), n, dk);
    }
  return g;
}

// ---------------------------------------------------------------- shifted windows

std::int64_t relative_position_index(std::int64_t i, std::int64_t j, std::int64_t window) {
  const std::int64_t iy = i / window, ix = i % window, jy = j / window, jx = j % window;
  return (iy - jy + window - 1) * (2 * window - 1) + (ix - jx + window - 1);
}

namespace {

void check_window(const Tensor& q, const Tensor& k, const Tensor& v, const WindowSpec& w, const Tensor* bias,
                  const std::string& who) {
  if (w.window < 1 || w.heads < 1 || w.head_dim < 1) throw ConfigError(who + ": invalid window spec");
  if (w.shift < 0 || w.shift >= w.window) throw ConfigError(who + ": shift must lie in [0, window)");
  if (w.height % w.window != 0 || w.width % w.window != 0) {
    throw DimensionError(who + ": grid " + std::to_string(w.height) + "x" + std::to_string(w.width) +
                         " is not a multiple of window " + std::to_string(w.window));
  }
  const std::int64_t expect = w.batch * w.height * w.width * w.heads * w.head_dim;
  if (q.numel() != expect || k.numel() != expect || v.numel() != expect) {
    throw DimensionError(who + ": q/k/v must hold [batch*height*width x heads*head_dim]");
  }
  if (bias) {
    const std::int64_t span = 2 * w.window - 1;
    if (bias->numel() != span * span * w.heads) {
      throw DimensionError(who + ": relative bias table must be [(2w-1)^2 x heads]");
    }
  }
}

// Region id of every grid cell before the cyclic shift: 3 bands per axis.
std::vector<int> region_labels(const WindowSpec& w) {
  std::vector<int> labels(static_cast<std::size_t>(w.height * w.width), 0);
  if (w.shift == 0) return labels;
  auto band = [&](std::int64_t c, std::int64_t size) {
    if (c < size - w.window) return 0;
    return c < size - w.shift ? 1 : 2;
  };
  for (std::int64_t y = 0; y < w.height; ++y)
    for (std::int64_t x = 0; x < w.width; ++x)
      labels[static_cast<std::size_t>(y * w.width + x)] = band(y, w.height) * 3 + band(x, w.width);
  return labels;
}

// Row index (within the flattened batch) of token t of window (b, wy, wx).
std::int64_t window_row(const WindowSpec& w, std::int64_t b, std::int64_t wy, std::int64_t wx, std::int64_t t) {
  const std::int64_t y = wy * w.window + t / w.window, x = wx * w.window + t % w.window;
  return (b * w.height + y) * w.width + x;
}

void gather_window(const Tensor& src, const WindowSpec& w, std::int64_t b, std::int64_t wy, std::int64_t wx,
                   Tensor& dst) {
  const std::int64_t width = w.heads * w.head_dim, tokens = w.window * w.window;
  for (std::int64_t t = 0; t < tokens; ++t)
    std::memcpy(dst.data() + t * width, src.data() + window_row(w, b, wy, wx, t) * width,
                static_cast<std::size_t>(width) * sizeof(float));
}

void scatter_window(const Tensor& src, const WindowSpec& w, std::int64_t b, std::int64_t wy, std::int64_t wx,
                    Tensor& dst) {
  const std::int64_t width = w.heads * w.head_dim, tokens = w.window * w.window;
  for (std::int64_t t = 0; t < tokens; ++t)
    std::memcpy(dst.data() + window_row(w, b, wy, wx, t) * width, src.data() + t * width,
                static_cast<std::size_t>(width) * sizeof(float));
}

MatrixView window_head(Tensor& t, const WindowSpec& w, std::int64_t h) {
  return {t.data() + h * w.head_dim, w.window * w.window, w.head_dim, w.heads * w.head_dim};
}

}  // namespace

Tensor window_forward(const Tensor& q, const Tensor& k, const Tensor& v, const WindowSpec& w, const Tensor* rel_bias,
                      WindowCache* cache) {
  check_window(q, k, v, w, rel_bias, "window attention");
  const std::int64_t tokens = w.window * w.window, width = w.heads * w.head_dim;
  const std::int64_t nwy = w.height / w.window, nwx = w.width / w.window;
  const float s = score_scale(w.head_dim);
  const std::vector<int> labels = region_labels(w);

  Tensor probs = Tensor::uninitialized({w.batch * nwy * nwx * w.heads * tokens, tokens});
  Tensor ctx = Tensor::uninitialized({w.batch * w.height * w.width, width});
  Tensor qw = Tensor::uninitialized({tokens, width}), kw = Tensor::uninitialized({tokens, width}),
         vw = Tensor::uninitialized({tokens, width}), cw = Tensor::uninitialized({tokens, width});
  std::vector<int> win_labels(static_cast<std::size_t>(tokens));
  std::int64_t win = 0;
  for (std::int64_t b = 0; b < w.batch; ++b)
    for (std::int64_t wy = 0; wy < nwy; ++wy)
      for (std::int64_t wx = 0; wx < nwx; ++wx, ++win) {
        gather_window(q, w, b, wy, wx, qw);
        gather_window(k, w, b, wy, wx, kw);
        gather_window(v, w, b, wy, wx, vw);
        for (std::int64_t t = 0; t < tokens; ++t) {
          const std::int64_t row = window_row(w, b, wy, wx, t) - b * w.height * w.width;
          win_labels[static_cast<std::size_t>(t)] = labels[static_cast<std::size_t>(row)];
        }
        for (std::int64_t h = 0; h < w.heads; ++h) {
          MatrixView p{probs.data() + (win * w.heads + h) * tokens * tokens, tokens, tokens, tokens};
          nk::gemm_nt(window_head(qw, w, h), window_head(kw, w, h), p, s);
          for (std::int64_t i = 0; i < tokens; ++i) {
            float* row = p.row(i);
            for (std::int64_t j = 0; j < tokens; ++j) {
              if (rel_bias) row[j] += (*rel_bias)[relative_position_index(i, j, w.window) * w.heads + h];
              if (win_labels[static_cast<std::size_t>(i)] != win_labels[static_cast<std::size_t>(j)]) row[j] = kNegInf;
            }
          }
          nk::softmax_rows_inplace(p);
          nk::gemm(p, window_head(vw, w, h), window_head(cw, w, h));
        }
        scatter_window(cw, w, b, wy, wx, ctx);
      }
  if (cache) cache->probs = std::move(probs);
  return ctx;
}

WindowGrads window_backward(const Tensor& q, const Tensor& k, const Tensor& v, const WindowSpec& w,
                            const WindowCache& cache, const Tensor& grad_context, bool with_bias) {
  check_window(q, k, v, w, nullptr, "window attention backward");
  const std::int64_t tokens = w.window * w.window, width = w.heads * w.head_dim;
  const std::int64_t nwy = w.height / w.window, nwx = w.width / w.window;
  const std::int64_t span = 2 * w.window - 1;
  const float s = score_scale(w.head_dim);

  WindowGrads out;
  out.qkv = {Tensor::uninitialized(q.shape()), Tensor::uninitialized(k.shape()), Tensor::uninitialized(v.shape())};
  if (with_bias) out.rel_bias = Tensor::zeros({span * span, w.heads});
  Tensor qw = Tensor::uninitialized({tokens, width}), kw = Tensor::uninitialized({tokens, width}),
         vw = Tensor::uninitialized({tokens, width}), gw = Tensor::uninitialized({tokens, width});
  Tensor dqw = Tensor::uninitialized({tokens, width}), dkw = Tensor::uninitialized({tokens, width}),
         dvw = Tensor::uninitialized({tokens, width});
  Tensor dp = Tensor::uninitialized({tokens, tokens});
  std::int64_t win = 0;
  for (std::int64_t b = 0; b < w.batch; ++b)
    for (std::int64_t wy = 0; wy < nwy; ++wy)
      for (std::int64_t wx = 0; wx < nwx; ++wx, ++win) {
        gather_window(q, w, b, wy, wx, qw);
        gather_window(k, w, b, wy, wx, kw);
        gather_window(v, w, b, wy, wx, vw);
        gather_window(grad_context, w, b, wy, wx, gw);
        for (std::int64_t h = 0; h < w.heads; ++h) {
          ConstMatrixView p{cache.probs.data() + (win * w.heads + h) * tokens * tokens, tokens, tokens, tokens};
          nk::gemm_nt(window_head(gw, w, h), window_head(vw, w, h), dp.matrix());
          nk::gemm_tn(p, window_head(gw, w, h), window_head(dvw, w, h));
          nk::softmax_rows_backward_inplace(p, dp.matrix());
          if (with_bias) {
            for (std::int64_t i = 0; i < tokens; ++i)
              for (std::int64_t j = 0; j < tokens; ++j)
                out.rel_bias[relative_position_index(i, j, w.window) * w.heads + h] += dp[i * tokens + j];
          }
          nk::gemm(dp.matrix(), window_head(kw, w, h), window_head(dqw, w, h), s);
          nk::gemm_tn(dp.matrix(), window_head(qw, w, h), window_head(dkw, w, h), s);
        }
        scatter_window(dqw, w, b, wy, wx, out.qkv.q);
        scatter_window(dkw, w, b, wy, wx, out.qkv.k);
        scatter_window(dvw, w, b, wy, wx, out.qkv.v);
      }
  return out;
}

Tensor roll_pad(const Tensor& x, std::int64_t batch, std::int64_t height, std::int64_t width, std::int64_t padded_h,
                std::int64_t padded_w, std::int64_t shift) {
  const std::int64_t c = x.shape().back();
  if (x.numel() != batch * height * width * c || padded_h < height || padded_w < width) {
    throw DimensionError("roll_pad: grid does not match input");
  }
  Tensor out = Tensor::zeros({batch * padded_h * padded_w, c});
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t y = 0; y < padded_h; ++y) {
      const std::int64_t sy = (y + shift) % padded_h;
      if (sy >= height) continue;
      for (std::int64_t xx = 0; xx < padded_w; ++xx) {
        const std::int64_t sx = (xx + shift) % padded_w;
        if (sx >= width) continue;
        std::memcpy(out.data() + ((b * padded_h + y) * padded_w + xx) * c, x.data() + ((b * height + sy) * width + sx) * c,
                    static_cast<std::size_t>(c) * sizeof(float));
      }
    }
  return out;
}

Tensor unroll_crop(const Tensor& x, std::int64_t batch, std::int64_t height, std::int64_t width, std::int64_t padded_h,
                   std::int64_t padded_w, std::int64_t shift) {
  const std::int64_t c = x.shape().back();
  if (x.numel() != batch * padded_h * padded_w * c) throw DimensionError("unroll_crop: grid does not match input");
  Tensor out = Tensor::uninitialized({batch * height * width, c});
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t y = 0; y < height; ++y) {
      const std::int64_t sy = (y - shift % padded_h + padded_h) % padded_h;
      for (std::int64_t xx = 0; xx < width; ++xx) {
        const std::int64_t sx = (xx - shift % padded_w + padded_w) % padded_w;
        std::memcpy(out.data() + ((b * height + y) * width + xx) * c, x.data() + ((b * padded_h + sy) * padded_w + sx) * c,
                    static_cast<std::size_t>(c) * sizeof(float));
      }
    }
  return out;
}

// ---------------------------------------------------------------- single-head operations

namespace {

HeadLayout single_head(const Tensor& q, const Tensor& k, const Tensor& v, const std::string& who) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError(who + ": q, k and v must share an [n x d] shape");
  }
  return {1, q.dim(0), 1, q.dim(1)};
}

}  // namespace

Tensor full_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  return full_forward(q, k, v, single_head(q, k, v, "full_attention"));
}

Tensor sliding_window_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t window) {
  if (window < 2 || window % 2 != 0) {
    throw ConfigError("sliding_window_attention: window must be even and >= 2, got " + std::to_string(window));
  }
  return sliding_forward(q, k, v, single_head(q, k, v, "sliding_window_attention"), {window / 2, 0});
}

Tensor nystrom_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t landmarks,
                         std::int64_t pinv_iterations) {
  return nystrom_forward(q, k, v, single_head(q, k, v, "nystrom_attention"), landmarks, pinv_iterations);
}

Tensor shifted_window_attention_2d(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t window, bool shifted,
                                   const Tensor* rel_bias) {
  if (q.rank() != 3 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("shifted_window_attention_2d: q, k and v must share an [H x W x d] shape");
  }
  if (window < 1) throw ConfigError("shifted_window_attention_2d: window must be >= 1");
  const std::int64_t h = q.dim(0), w = q.dim(1), d = q.dim(2);
  const std::int64_t ph = (h + window - 1) / window * window, pw = (w + window - 1) / window * window;
  const std::int64_t shift = shifted ? window / 2 : 0;
  WindowSpec spec{1, ph, pw, window, shift, 1, d};
  Tensor qp = roll_pad(q, 1, h, w, ph, pw, shift), kp = roll_pad(k, 1, h, w, ph, pw, shift),
         vp = roll_pad(v, 1, h, w, ph, pw, shift);
  Tensor ctx = window_forward(qp, kp, vp, spec, rel_bias);
  return unroll_crop(ctx, 1, h, w, ph, pw, shift).reshaped({h, w, d});
}

Tensor shifted_window_attention_2d(const Tensor& x, std::int64_t window, bool shifted) {
  return shifted_window_attention_2d(x, x, x, window, shifted);
}

}  // namespace attnprof::attn
