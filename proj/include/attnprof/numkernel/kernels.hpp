#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "attnprof/numkernel/tensor.hpp"

// Dense forward and backward kernels. Every kernel tallies its logical
// operation count (see counters.hpp) and allocates outputs through Tensor,
// so both cost and memory are observable.
namespace attnprof::nk {

// ---------------------------------------------------------------- contraction

// c = alpha * a * b + beta * c
void gemm(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha = 1.f, float beta = 0.f);
// c = alpha * a * b^T + beta * c
void gemm_nt(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha = 1.f, float beta = 0.f);
// c = alpha * a^T * b + beta * c
void gemm_tn(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha = 1.f, float beta = 0.f);

// Same contractions without tallying, for kernels that run padded blocks
// through gemm and tally only their logical work themselves.
void gemm_untallied(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha = 1.f, float beta = 0.f);
void gemm_nt_untallied(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha = 1.f, float beta = 0.f);
void gemm_tn_untallied(ConstMatrixView a, ConstMatrixView b, MatrixView c, float alpha = 1.f, float beta = 0.f);

// [m x k] * [k x n]; throws DimensionError when the inner dimensions differ.
Tensor matmul(const Tensor& a, const Tensor& b);

struct MatmulGrads {
  Tensor grad_a;
  Tensor grad_b;
};
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& grad_out);

Tensor transpose(const Tensor& x);
void transpose_into(ConstMatrixView x, MatrixView out);

// ---------------------------------------------------------------- softmax

// Row-wise softmax with max subtraction. -inf entries receive probability 0.
Tensor softmax_rows(const Tensor& x);
void softmax_rows_inplace(MatrixView x);
// Softmax of a single row without tallying; callers count what they use.
void softmax_span(std::span<float> row);

// grad_in = p * (grad_out - rowsum(grad_out * p))
Tensor softmax_rows_backward(const Tensor& probs, const Tensor& grad_out);
void softmax_rows_backward_inplace(ConstMatrixView probs, MatrixView grad);
void softmax_span_backward(std::span<const float> probs, std::span<float> grad);

// ---------------------------------------------------------------- normalisation

struct NormStats {
  Tensor mean;  // one per normalised row
  Tensor rstd;
};

// Normalises each row over its columns; affine parameters are per column.
Tensor layernorm(const Tensor& x, std::span<const float> gamma, std::span<const float> beta, float eps,
                 NormStats* stats = nullptr);

struct NormGrads {
  Tensor grad_x;
  Tensor grad_gamma;
  Tensor grad_beta;
};
NormGrads layernorm_backward(const Tensor& x, const NormStats& stats, std::span<const float> gamma,
                             const Tensor& grad_out);

// Normalises each row (a channel of a C x T signal) over time; affine
// parameters are per row. This is group norm with one channel per group.
Tensor channel_norm(const Tensor& x, std::span<const float> gamma, std::span<const float> beta, float eps,
                    NormStats* stats = nullptr);
NormGrads channel_norm_backward(const Tensor& x, const NormStats& stats, std::span<const float> gamma,
                                const Tensor& grad_out);

// ---------------------------------------------------------------- activations

// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor gelu_backward(const Tensor& x, const Tensor& grad_out);

Tensor tanh_act(const Tensor& x);
Tensor tanh_backward(const Tensor& y, const Tensor& grad_out);

// ---------------------------------------------------------------- lookups / layout

// Gathers rows of `table` ([V x d]); ids must lie in [0, V).
Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids);
// Scatter-adds grad rows into grad_table.
void embedding_backward(const Tensor& grad_out, std::span<const std::int32_t> ids, Tensor& grad_table);

// [H x W x C] image -> [(H/p)(W/p) x p*p*C] patch rows, row-major patch order.
Tensor patchify(const Tensor& image, std::int64_t patch);
Tensor patchify_backward(const Tensor& grad_patches, const Shape& image_shape, std::int64_t patch);

// ---------------------------------------------------------------- convolution

struct Conv1dParams {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
};

std::int64_t conv1d_output_length(std::int64_t length, std::int64_t kernel, const Conv1dParams& p);

// x: [C_in x T], weight: [C_out x C_in/groups x K], bias: empty or C_out.
// Throws TooShortError when the padded input is shorter than the kernel.
Tensor conv1d(const Tensor& x, const Tensor& weight, std::span<const float> bias, const Conv1dParams& p);

struct Conv1dGrads {
  Tensor grad_x;
  Tensor grad_weight;
  Tensor grad_bias;
};
Conv1dGrads conv1d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out, const Conv1dParams& p,
                            bool with_bias, bool need_grad_x = true);

// ---------------------------------------------------------------- elementwise helpers (not tallied)

void add_inplace(Tensor& x, const Tensor& y);
void add_row_bias(MatrixView x, std::span<const float> bias);
void scale_inplace(Tensor& x, float s);
// out[c] += sum over rows of g[r][c]
void accumulate_column_sums(ConstMatrixView g, std::span<float> out);
void axpy_inplace(Tensor& x, float a, const Tensor& y);

}  // namespace attnprof::nk
