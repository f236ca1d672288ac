#include "attnprof/numkernel/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <string>

#include "attnprof/errors.hpp"
#include "attnprof/numkernel/counters.hpp"
#include "attnprof/numkernel/parallel.hpp"

namespace attnprof::nk {
namespace {

constexpr std::int64_t kMr = 6;
constexpr std::int64_t kNr = 64;

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

// acc = A[0:kMr, 0:k] * B[0:k, 0:kNr]; fixed trip counts so the accumulator
// block stays in vector registers.
inline void micro_full(const float* a, std::int64_t lda, const float* b, std::int64_t ldb, std::int64_t k,
                       float (&acc)[kMr][kNr]) {
  for (std::int64_t r = 0; r < kMr; ++r)
    for (std::int64_t j = 0; j < kNr; ++j) acc[r][j] = 0.f;
  for (std::int64_t p = 0; p < k; ++p) {
    const float* brow = b + p * ldb;
    for (std::int64_t r = 0; r < kMr; ++r) {
      const float av = a[r * lda + p];
      for (std::int64_t j = 0; j < kNr; ++j) acc[r][j] += av * brow[j];
    }
  }
}

inline void micro_edge(const float* a, std::int64_t lda, const float* b, std::int64_t ldb, std::int64_t k,
                       std::int64_t mr, std::int64_t nr, float (&acc)[kMr][kNr]) {
  for (std::int64_t r = 0; r < kMr; ++r)
    for (std::int64_t j = 0; j < kNr; ++j) acc[r][j] = 0.f;
  for (std::int64_t p = 0; p < k; ++p) {
    const float* brow = b + p * ldb;
    for (std::int64_t r = 0; r < mr; ++r) {
      const float av = a[r * lda + p];
      for (std::int64_t j = 0; j < nr; ++j) acc[r][j] += av * brow[j];
    }
  }
}

void gemm_nn_impl(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha, float beta) {
  const std::int64_t m = a.rows, k = a.cols, n = b.cols;
  const std::int64_t row_blocks = (m + kMr - 1) / kMr;
  parallel_for(0, row_blocks, 4, [&](std::int64_t lo, std::int64_t hi) {
    float acc[kMr][kNr];
    for (std::int64_t j0 = 0; j0 < n; j0 += kNr) {
      const std::int64_t nr = std::min(kNr, n - j0);
      for (std::int64_t bi = lo; bi < hi; ++bi) {
        const std::int64_t i0 = bi * kMr;
        const std::int64_t mr = std::min(kMr, m - i0);
        if (mr == kMr && nr == kNr) {
          micro_full(a.row(i0), a.ld, b.data + j0, b.ld, k, acc);
        } else {
          micro_edge(a.row(i0), a.ld, b.data + j0, b.ld, k, mr, nr, acc);
        }
        for (std::int64_t r = 0; r < mr; ++r) {
          float* crow = c.row(i0 + r) + j0;
          if (beta == 0.f) {
            for (std::int64_t j = 0; j < nr; ++j) crow[j] = alpha * acc[r][j];
          } else {
            for (std::int64_t j = 0; j < nr; ++j) crow[j] = alpha * acc[r][j] + beta * crow[j];
          }
        }
      }
    }
  });
}

}  // namespace

void gemm_untallied(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha, float beta) {
  require(a.cols == b.rows, "gemm: inner dimensions differ (" + std::to_string(a.cols) + " vs " +
                                std::to_string(b.rows) + ")");
  require(c.rows == a.rows && c.cols == b.cols, "gemm: output shape mismatch");
  if (c.rows == 0 || c.cols == 0) return;
  gemm_nn_impl(a, b, c, alpha, beta);
}

void gemm_nt_untallied(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha, float beta) {
  require(a.cols == b.cols, "gemm_nt: inner dimensions differ");
  require(c.rows == a.rows && c.cols == b.rows, "gemm_nt: output shape mismatch");
  if (c.rows == 0 || c.cols == 0) return;
  Tensor bt = Tensor::uninitialized({b.cols, b.rows});
  transpose_into(b, bt.matrix());
  gemm_nn_impl(a, bt.matrix(), c, alpha, beta);
}

void gemm_tn_untallied(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha, float beta) {
  require(a.rows == b.rows, "gemm_tn: inner dimensions differ");
  require(c.rows == a.cols && c.cols == b.cols, "gemm_tn: output shape mismatch");
  if (c.rows == 0 || c.cols == 0) return;
  Tensor at = Tensor::uninitialized({a.cols, a.rows});
  transpose_into(a, at.matrix());
  gemm_nn_impl(at.matrix(), b, c, alpha, beta);
}

void gemm(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha, float beta) {
  gemm_untallied(a, b, c, alpha, beta);
  count_macs(a.rows * a.cols * b.cols);
}

void gemm_nt(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha, float beta) {
  gemm_nt_untallied(a, b, c, alpha, beta);
  count_macs(a.rows * a.cols * b.rows);
}

void gemm_tn(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha, float beta) {
  gemm_tn_untallied(a, b, c, alpha, beta);
  count_macs(a.cols * a.rows * b.cols);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be rank 2");
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions differ: " + shape_string(a.shape()) + " * " +
                                    shape_string(b.shape()));
  Tensor c = Tensor::uninitialized({a.dim(0), b.dim(1)});
  gemm(a.matrix(), b.matrix(), c.matrix());
  return c;
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& grad_out) {
  require(grad_out.rank() == 2 && grad_out.dim(0) == a.dim(0) && grad_out.dim(1) == b.dim(1),
          "matmul_backward: upstream gradient does not match forward output");
  MatmulGrads g{Tensor::uninitialized(a.shape()), Tensor::uninitialized(b.shape())};
  gemm_nt(grad_out.matrix(), b.matrix(), g.grad_a.matrix());
  gemm_tn(a.matrix(), grad_out.matrix(), g.grad_b.matrix());
  return g;
}

void transpose_into(ConstMatrixView x, MatrixView out) {
  require(out.rows == x.cols && out.cols == x.rows, "transpose: output shape mismatch");
  constexpr std::int64_t kBlock = 32;
  for (std::int64_t i0 = 0; i0 < x.rows; i0 += kBlock) {
    for (std::int64_t j0 = 0; j0 < x.cols; j0 += kBlock) {
      const std::int64_t ie = std::min(x.rows, i0 + kBlock), je = std::min(x.cols, j0 + kBlock);
      for (std::int64_t i = i0; i < ie; ++i)
        for (std::int64_t j = j0; j < je; ++j) out(j, i) = x(i, j);
    }
  }
}

Tensor transpose(const Tensor& x) {
  require(x.rank() == 2, "transpose: rank 2 required");
  Tensor out = Tensor::uninitialized({x.dim(1), x.dim(0)});
  transpose_into(x.matrix(), out.matrix());
  return out;
}

// ---------------------------------------------------------------- softmax

void softmax_span(std::span<float> row) {
  if (row.empty()) return;
  float mx = -std::numeric_limits<float>::infinity();
  for (float v : row) mx = std::max(mx, v);
  if (mx == -std::numeric_limits<float>::infinity()) {
    std::fill(row.begin(), row.end(), 0.f);
    return;
  }
  float sum = 0.f;
  for (float& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  const float inv = 1.f / sum;
  for (float& v : row) v *= inv;
}

void softmax_rows_inplace(MatrixView x) {
  count_elementwise(x.rows * x.cols);
  parallel_for(0, x.rows, 64, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t r = lo; r < hi; ++r) softmax_span({x.row(r), static_cast<std::size_t>(x.cols)});
  });
}

Tensor softmax_rows(const Tensor& x) {
  Tensor y(x);
  if (y.rank() == 0 || y.numel() == 0) return y;
  softmax_rows_inplace(y.matrix());
  return y;
}

void softmax_span_backward(std::span<const float> probs, std::span<float> grad) {
  float dot = 0.f;
  for (std::size_t j = 0; j < probs.size(); ++j) dot += probs[j] * grad[j];
  for (std::size_t j = 0; j < probs.size(); ++j) grad[j] = probs[j] * (grad[j] - dot);
}

void softmax_rows_backward_inplace(ConstMatrixView probs, MatrixView grad) {
  require(probs.rows == grad.rows && probs.cols == grad.cols, "softmax_backward: shape mismatch");
  parallel_for(0, probs.rows, 64, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t r = lo; r < hi; ++r) {
      softmax_span_backward({probs.row(r), static_cast<std::size_t>(probs.cols)},
                            {grad.row(r), static_cast<std::size_t>(grad.cols)});
    }
  });
}

Tensor softmax_rows_backward(const Tensor& probs, const Tensor& grad_out) {
  require(probs.shape() == grad_out.shape(), "softmax_backward: upstream gradient does not match forward output");
  Tensor g(grad_out);
  if (g.numel() == 0) return g;
  softmax_rows_backward_inplace(probs.matrix(), g.matrix());
  return g;
}

// ---------------------------------------------------------------- normalisation

namespace {

// Normalises rows; `per_row_affine` selects whether gamma/beta index rows or columns.
Tensor normalise_rows(const Tensor& x, std::span<const float> gamma, std::span<const float> beta, float eps,
                      NormStats* stats, bool per_row_affine) {
  auto xv = x.matrix();
  const std::size_t affine = static_cast<std::size_t>(per_row_affine ? xv.rows : xv.cols);
  require(gamma.size() == affine && beta.size() == affine, "norm: affine parameter size mismatch");
  count_elementwise(xv.rows * xv.cols);
  Tensor y = Tensor::uninitialized(x.shape());
  auto yv = y.matrix();
  if (stats) {
    stats->mean = Tensor::uninitialized({xv.rows});
    stats->rstd = Tensor::uninitialized({xv.rows});
  }
  const double inv_n = xv.cols > 0 ? 1.0 / static_cast<double>(xv.cols) : 0.0;
  for (std::int64_t r = 0; r < xv.rows; ++r) {
    const float* in = xv.row(r);
    double mean = 0.0;
    for (std::int64_t c = 0; c < xv.cols; ++c) mean += in[c];
    mean *= inv_n;
    double var = 0.0;
    for (std::int64_t c = 0; c < xv.cols; ++c) {
      const double d = in[c] - mean;
      var += d * d;
    }
    var *= inv_n;
    const float m = static_cast<float>(mean);
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    float* out = yv.row(r);
    if (per_row_affine) {
      for (std::int64_t c = 0; c < xv.cols; ++c) out[c] = (in[c] - m) * rs * gamma[r] + beta[r];
    } else {
      for (std::int64_t c = 0; c < xv.cols; ++c) out[c] = (in[c] - m) * rs * gamma[c] + beta[c];
    }
    if (stats) {
      stats->mean[r] = m;
      stats->rstd[r] = rs;
    }
  }
  return y;
}

NormGrads normalise_rows_backward(const Tensor& x, const NormStats& stats, std::span<const float> gamma,
                                  const Tensor& grad_out, bool per_row_affine) {
  require(x.shape() == grad_out.shape(), "norm_backward: upstream gradient does not match forward output");
  auto xv = x.matrix();
  auto gv = grad_out.matrix();
  const std::int64_t affine = per_row_affine ? xv.rows : xv.cols;
  NormGrads g{Tensor::uninitialized(x.shape()), Tensor::zeros({affine}), Tensor::zeros({affine})};
  auto gx = g.grad_x.matrix();
  const float inv_n = xv.cols > 0 ? 1.f / static_cast<float>(xv.cols) : 0.f;
  std::vector<float> xhat(static_cast<std::size_t>(xv.cols)), gxhat(static_cast<std::size_t>(xv.cols));
  for (std::int64_t r = 0; r < xv.rows; ++r) {
    const float m = stats.mean[r], rs = stats.rstd[r];
    float sum_g = 0.f, sum_gx = 0.f;
    for (std::int64_t c = 0; c < xv.cols; ++c) {
      const float xh = (xv(r, c) - m) * rs;
      const float go = gv(r, c);
      xhat[c] = xh;
      const std::int64_t ai = per_row_affine ? r : c;
      g.grad_gamma[ai] += go * xh;
      g.grad_beta[ai] += go;
      const float gh = go * gamma[static_cast<std::size_t>(ai)];
      gxhat[c] = gh;
      sum_g += gh;
      sum_gx += gh * xh;
    }
    const float mean_g = sum_g * inv_n, mean_gx = sum_gx * inv_n;
    for (std::int64_t c = 0; c < xv.cols; ++c) gx(r, c) = rs * (gxhat[c] - mean_g - xhat[c] * mean_gx);
  }
  return g;
}

}  // namespace

Tensor layernorm(const Tensor& x, std::span<const float> gamma, std::span<const float> beta, float eps,
                 NormStats* stats) {
  return normalise_rows(x, gamma, beta, eps, stats, false);
}

NormGrads layernorm_backward(const Tensor& x, const NormStats& stats, std::span<const float> gamma,
                             const Tensor& grad_out) {
  return normalise_rows_backward(x, stats, gamma, grad_out, false);
}

Tensor channel_norm(const Tensor& x, std::span<const float> gamma, std::span<const float> beta, float eps,
                    NormStats* stats) {
  return normalise_rows(x, gamma, beta, eps, stats, true);
}

NormGrads channel_norm_backward(const Tensor& x, const NormStats& stats, std::span<const float> gamma,
                                const Tensor& grad_out) {
  return normalise_rows_backward(x, stats, gamma, grad_out, true);
}

// ---------------------------------------------------------------- activations

Tensor gelu(const Tensor& x) {
  count_elementwise(x.numel());
  Tensor y = Tensor::uninitialized(x.shape());
  const float inv_sqrt2 = static_cast<float>(1.0 / std::numbers::sqrt2);
  const float* in = x.data();
  float* out = y.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = 0.5f * in[i] * (1.f + std::erf(in[i] * inv_sqrt2));
  return y;
}

Tensor gelu_backward(const Tensor& x, const Tensor& grad_out) {
  require(x.shape() == grad_out.shape(), "gelu_backward: upstream gradient does not match forward output");
  Tensor g = Tensor::uninitialized(x.shape());
  const float inv_sqrt2 = static_cast<float>(1.0 / std::numbers::sqrt2);
  const float inv_sqrt2pi = static_cast<float>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const float v = x[i];
    const float cdf = 0.5f * (1.f + std::erf(v * inv_sqrt2));
    const float pdf = inv_sqrt2pi * std::exp(-0.5f * v * v);
    g[i] = grad_out[i] * (cdf + v * pdf);
  }
  return g;
}

Tensor tanh_act(const Tensor& x) {
  count_elementwise(x.numel());
  Tensor y = Tensor::uninitialized(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = std::tanh(x[i]);
  return y;
}

Tensor tanh_backward(const Tensor& y, const Tensor& grad_out) {
  require(y.shape() == grad_out.shape(), "tanh_backward: upstream gradient does not match forward output");
  Tensor g = Tensor::uninitialized(y.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) g[i] = grad_out[i] * (1.f - y[i] * y[i]);
  return g;
}

// ---------------------------------------------------------------- lookups / layout

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids) {
  require(table.rank() == 2, "embedding_lookup: table must be rank 2");
  const std::int64_t vocab = table.dim(0), d = table.dim(1);
  Tensor out = Tensor::uninitialized({static_cast<std::int64_t>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) throw DimensionError("embedding_lookup: id " + std::to_string(ids[i]) + " out of range");
    std::memcpy(out.data() + static_cast<std::int64_t>(i) * d, table.data() + ids[i] * d,
                static_cast<std::size_t>(d) * sizeof(float));
  }
  return out;
}

void embedding_backward(const Tensor& grad_out, std::span<const std::int32_t> ids, Tensor& grad_table) {
  require(grad_out.rank() == 2 && grad_out.dim(0) == static_cast<std::int64_t>(ids.size()) &&
              grad_out.dim(1) == grad_table.dim(1),
          "embedding_backward: upstream gradient does not match forward output");
  const std::int64_t d = grad_table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    float* dst = grad_table.data() + ids[i] * d;
    const float* src = grad_out.data() + static_cast<std::int64_t>(i) * d;
    for (std::int64_t c = 0; c < d; ++c) dst[c] += src[c];
  }
}

Tensor patchify(const Tensor& image, std::int64_t patch) {
  require(image.rank() == 3, "patchify: image must be [H x W x C]");
  const std::int64_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  if (patch < 1 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: image " + shape_string(image.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const std::int64_t gh = h / patch, gw = w / patch, row_len = patch * ch;
  Tensor out = Tensor::uninitialized({gh * gw, patch * patch * ch});
  for (std::int64_t py = 0; py < gh; ++py)
    for (std::int64_t px = 0; px < gw; ++px) {
      float* dst = out.data() + (py * gw + px) * patch * row_len;
      for (std::int64_t y = 0; y < patch; ++y) {
        const float* src = image.data() + ((py * patch + y) * w + px * patch) * ch;
        std::memcpy(dst + y * row_len, src, static_cast<std::size_t>(row_len) * sizeof(float));
      }
    }
  return out;
}

Tensor patchify_backward(const Tensor& grad_patches, const Shape& image_shape, std::int64_t patch) {
  require(image_shape.size() == 3, "patchify_backward: image shape must be rank 3");
  const std::int64_t h = image_shape[0], w = image_shape[1], ch = image_shape[2];
  const std::int64_t gh = h / patch, gw = w / patch, row_len = patch * ch;
  require(grad_patches.rank() == 2 && grad_patches.dim(0) == gh * gw && grad_patches.dim(1) == patch * row_len,
          "patchify_backward: upstream gradient does not match forward output");
  Tensor out = Tensor::uninitialized(image_shape);
  for (std::int64_t py = 0; py < gh; ++py)
    for (std::int64_t px = 0; px < gw; ++px) {
      const float* src = grad_patches.data() + (py * gw + px) * patch * row_len;
      for (std::int64_t y = 0; y < patch; ++y) {
        float* dst = out.data() + ((py * patch + y) * w + px * patch) * ch;
        std::memcpy(dst, src + y * row_len, static_cast<std::size_t>(row_len) * sizeof(float));
      }
    }
  return out;
}

// ---------------------------------------------------------------- convolution

std::int64_t conv1d_output_length(std::int64_t length, std::int64_t kernel, const Conv1dParams& p) {
  const std::int64_t padded = length + 2 * p.padding;
  if (padded < kernel) return 0;
  return (padded - kernel) / p.stride + 1;
}

namespace {

struct ConvGeometry {
  std::int64_t c_in, c_out, kernel, length, out_len, cin_g, cout_g;
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& weight, const Conv1dParams& p) {
  require(x.rank() == 2, "conv1d: input must be [C_in x T]");
  require(weight.rank() == 3, "conv1d: weight must be [C_out x C_in/groups x K]");
  if (p.stride < 1 || p.groups < 1 || p.padding < 0) throw ConfigError("conv1d: invalid stride/groups/padding");
  ConvGeometry g{};
  g.c_in = x.dim(0);
  g.length = x.dim(1);
  g.c_out = weight.dim(0);
  g.kernel = weight.dim(2);
  require(g.c_in % p.groups == 0 && g.c_out % p.groups == 0, "conv1d: channels not divisible by groups");
  g.cin_g = g.c_in / p.groups;
  g.cout_g = g.c_out / p.groups;
  require(weight.dim(1) == g.cin_g, "conv1d: weight input channels " + std::to_string(weight.dim(1)) +
                                        " != C_in/groups " + std::to_string(g.cin_g));
  if (g.length + 2 * p.padding < g.kernel) {
    throw TooShortError("conv1d: input length " + std::to_string(g.length) + " shorter than kernel " +
                        std::to_string(g.kernel));
  }
  g.out_len = conv1d_output_length(g.length, g.kernel, p);
  return g;
}

Tensor pad_time(const Tensor& x, std::int64_t padding) {
  Tensor out = Tensor::zeros({x.dim(0), x.dim(1) + 2 * padding});
  for (std::int64_t c = 0; c < x.dim(0); ++c)
    std::memcpy(out.data() + c * out.dim(1) + padding, x.data() + c * x.dim(1),
                static_cast<std::size_t>(x.dim(1)) * sizeof(float));
  return out;
}

// Gathers tap k of every group: taps[k] is [C_out x C_in/groups], stacked groups.
Tensor gather_taps(const Tensor& weight) {
  const std::int64_t c_out = weight.dim(0), cin_g = weight.dim(1), kernel = weight.dim(2);
  Tensor taps = Tensor::uninitialized({kernel, c_out, cin_g});
  for (std::int64_t co = 0; co < c_out; ++co)
    for (std::int64_t ci = 0; ci < cin_g; ++ci)
      for (std::int64_t k = 0; k < kernel; ++k)
        taps[(k * c_out + co) * cin_g + ci] = weight[(co * cin_g + ci) * kernel + k];
  return taps;
}

// column[ci, t] = src[row0 + ci, t * stride + k]
void gather_strided(const Tensor& src, std::int64_t row0, std::int64_t rows, std::int64_t k, std::int64_t stride,
                    MatrixView column) {
  const std::int64_t len = src.dim(1);
  for (std::int64_t ci = 0; ci < rows; ++ci) {
    const float* s = src.data() + (row0 + ci) * len + k;
    float* d = column.row(ci);
    if (stride == 1) {
      std::memcpy(d, s, static_cast<std::size_t>(column.cols) * sizeof(float));
    } else {
      for (std::int64_t t = 0; t < column.cols; ++t) d[t] = s[t * stride];
    }
  }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& weight, std::span<const float> bias, const Conv1dParams& p) {
  const ConvGeometry g = conv_geometry(x, weight, p);
  require(bias.empty() || static_cast<std::int64_t>(bias.size()) == g.c_out, "conv1d: bias size mismatch");
  count_macs(g.c_out * g.out_len * g.cin_g * g.kernel);

  Tensor padded;
  const Tensor* src = &x;
  if (p.padding > 0) {
    padded = pad_time(x, p.padding);
    src = &padded;
  }
  Tensor taps = gather_taps(weight);
  Tensor out = Tensor::zeros({g.c_out, g.out_len});
  Tensor column = Tensor::uninitialized({g.cin_g, g.out_len});
  auto ov = out.matrix();
  for (std::int64_t grp = 0; grp < p.groups; ++grp) {
    for (std::int64_t k = 0; k < g.kernel; ++k) {
      gather_strided(*src, grp * g.cin_g, g.cin_g, k, p.stride, column.matrix());
      ConstMatrixView wk(taps.data() + (k * g.c_out + grp * g.cout_g) * g.cin_g, g.cout_g, g.cin_g, g.cin_g);
      gemm_nn_impl(wk, column.matrix(), ov.block(grp * g.cout_g, 0, g.cout_g, g.out_len), 1.f, 1.f);
    }
  }
  if (!bias.empty()) {
    for (std::int64_t co = 0; co < g.c_out; ++co) {
      float* row = ov.row(co);
      for (std::int64_t t = 0; t < g.out_len; ++t) row[t] += bias[static_cast<std::size_t>(co)];
    }
  }
  return out;
}

Conv1dGrads conv1d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out, const Conv1dParams& p,
                            bool with_bias, bool need_grad_x) {
  const ConvGeometry g = conv_geometry(x, weight, p);
  require(grad_out.rank() == 2 && grad_out.dim(0) == g.c_out && grad_out.dim(1) == g.out_len,
          "conv1d_backward: upstream gradient does not match forward output");
  Conv1dGrads grads;
  grads.grad_weight = Tensor::zeros(weight.shape());
  if (with_bias) {
    grads.grad_bias = Tensor::zeros({g.c_out});
    for (std::int64_t co = 0; co < g.c_out; ++co) {
      float s = 0.f;
      for (std::int64_t t = 0; t < g.out_len; ++t) s += grad_out[co * g.out_len + t];
      grads.grad_bias[co] = s;
    }
  }

  Tensor padded;
  const Tensor* src = &x;
  if (p.padding > 0) {
    padded = pad_time(x, p.padding);
    src = &padded;
  }
  Tensor taps = gather_taps(weight);
  Tensor column = Tensor::uninitialized({g.cin_g, g.out_len});
  Tensor tap_grad = Tensor::uninitialized({g.cout_g, g.cin_g});
  Tensor grad_src;
  Tensor grad_column;
  if (need_grad_x) {
    grad_src = Tensor::zeros(src->shape());
    grad_column = Tensor::uninitialized({g.cin_g, g.out_len});
  }
  auto gv = grad_out.matrix();
  const std::int64_t src_len = src->dim(1);
  for (std::int64_t grp = 0; grp < p.groups; ++grp) {
    ConstMatrixView gout = gv.block(grp * g.cout_g, 0, g.cout_g, g.out_len);
    for (std::int64_t k = 0; k < g.kernel; ++k) {
      gather_strided(*src, grp * g.cin_g, g.cin_g, k, p.stride, column.matrix());
      gemm_nt(gout, column.matrix(), tap_grad.matrix());
      for (std::int64_t co = 0; co < g.cout_g; ++co)
        for (std::int64_t ci = 0; ci < g.cin_g; ++ci)
          grads.grad_weight[((grp * g.cout_g + co) * g.cin_g + ci) * g.kernel + k] += tap_grad[co * g.cin_g + ci];
      if (need_grad_x) {
        ConstMatrixView wk(taps.data() + (k * g.c_out + grp * g.cout_g) * g.cin_g, g.cout_g, g.cin_g, g.cin_g);
        gemm_tn(wk, gout, grad_column.matrix());
        for (std::int64_t ci = 0; ci < g.cin_g; ++ci) {
          float* dst = grad_src.data() + (grp * g.cin_g + ci) * src_len + k;
          const float* s = grad_column.data() + ci * g.out_len;
          for (std::int64_t t = 0; t < g.out_len; ++t) dst[t * p.stride] += s[t];
        }
      }
    }
  }
  if (need_grad_x) {
    if (p.padding > 0) {
      grads.grad_x = Tensor::uninitialized(x.shape());
      for (std::int64_t c = 0; c < g.c_in; ++c)
        std::memcpy(grads.grad_x.data() + c * g.length, grad_src.data() + c * src_len + p.padding,
                    static_cast<std::size_t>(g.length) * sizeof(float));
    } else {
      grads.grad_x = std::move(grad_src);
    }
  }
  return grads;
}

// ---------------------------------------------------------------- elementwise helpers

void add_inplace(Tensor& x, const Tensor& y) {
  require(x.numel() == y.numel(), "add: size mismatch " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  float* a = x.data();
  const float* b = y.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) a[i] += b[i];
}

void add_row_bias(MatrixView x, std::span<const float> bias) {
  require(static_cast<std::int64_t>(bias.size()) == x.cols, "add_row_bias: bias size mismatch");
  for (std::int64_t r = 0; r < x.rows; ++r) {
    float* row = x.row(r);
    for (std::int64_t c = 0; c < x.cols; ++c) row[c] += bias[static_cast<std::size_t>(c)];
  }
}

void scale_inplace(Tensor& x, float s) {
  for (float& v : x.values()) v *= s;
}

void accumulate_column_sums(ConstMatrixView g, std::span<float> out) {
  if (out.empty()) return;
  require(static_cast<std::int64_t>(out.size()) == g.cols, "column sums: size mismatch");
  for (std::int64_t r = 0; r < g.rows; ++r) {
    const float* row = g.row(r);
    for (std::int64_t c = 0; c < g.cols; ++c) out[static_cast<std::size_t>(c)] += row[c];
  }
}

void axpy_inplace(Tensor& x, float a, const Tensor& y) {
  require(x.numel() == y.numel(), "axpy: size mismatch");
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] += a * y[i];
}

}  // namespace attnprof::nk
