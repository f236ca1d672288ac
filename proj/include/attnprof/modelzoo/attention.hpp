#pragma once

#include <cstdint>
#include <vector>

#include "attnprof/numkernel/tensor.hpp"

// Attention cores. Inputs are projected rows laid out as
// [batch*length x heads*head_dim]; each (example, head) pair is a strided
// view into them. Score/probability buffers are allocated while the
// SelfAttention tag of the caller is active.
namespace attnprof::attn {

using nk::Tensor;

struct HeadLayout {
  std::int64_t batch = 1;
  std::int64_t length = 0;
  std::int64_t heads = 1;
  std::int64_t head_dim = 0;

  std::int64_t rows() const { return batch * length; }
  std::int64_t width() const { return heads * head_dim; }
};

struct QkvGrads {
  Tensor q;
  Tensor k;
  Tensor v;
};

// ---------------------------------------------------------------- full

struct FullCache {
  Tensor probs;  // [batch*heads*n x n]
};

Tensor full_forward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& layout,
                    FullCache* cache = nullptr);
QkvGrads full_backward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& layout,
                       const FullCache& cache, const Tensor& grad_context);

// ---------------------------------------------------------------- sliding window

// Row i attends to keys [i - radius, i + radius] clipped to the sequence,
// plus the first `globals` tokens. The first `globals` rows attend to every
// key through their own projections (q_global rows are [batch*globals]).
struct SlidingSpec {
  std::int64_t radius = 0;
  std::int64_t globals = 0;
};

struct SlidingCache {
  Tensor probs;         // [batch*heads*n x globals + 2*radius + 1]
  Tensor global_probs;  // [batch*heads*globals x n]
};

struct GlobalQkv {
  const Tensor* q = nullptr;  // [batch*globals x width]
  const Tensor* k = nullptr;  // [batch*n x width]
  const Tensor* v = nullptr;
};

Tensor sliding_forward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& layout,
                       const SlidingSpec& spec, GlobalQkv global = {}, SlidingCache* cache = nullptr);

struct SlidingGrads {
  QkvGrads local;
  QkvGrads global;
};
SlidingGrads sliding_backward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& layout,
                              const SlidingSpec& spec, GlobalQkv global, const SlidingCache& cache,
                              const Tensor& grad_context);

// Number of keys row `row` attends to (0 for global rows, which use the global path).
std::int64_t sliding_row_keys(std::int64_t row, std::int64_t length, const SlidingSpec& spec);

// ---------------------------------------------------------------- Nystrom

// Newton-style iteration towards pinv(a). Z0 = a^T / (max col sum * max row sum).
// Throws NumericalError when ||I - a Z|| grows three iterations in a row.
// `iterates` receives Z_0 .. Z_{iters-1}.
Tensor iterative_pinv(const Tensor& a, std::int64_t iterations, std::vector<Tensor>* iterates = nullptr);
// Gradient wrt `a` given the gradient wrt the returned pseudo-inverse. The
// normalising constant of Z0 is treated as fixed.
Tensor iterative_pinv_backward(const Tensor& a, const std::vector<Tensor>& iterates, const Tensor& grad_pinv);

// Mean over `segments` contiguous row segments [floor(j*n/m), floor((j+1)*n/m)).
Tensor segment_means(nk::ConstMatrixView x, std::int64_t segments);

struct NystromHeadCache {
  Tensor q_land, k_land, k1, k2, k3, w, u, z;
  std::vector<Tensor> z_iterates;
};

struct NystromCache {
  std::vector<NystromHeadCache> heads;  // batch*heads entries
};

// Throws ConfigError when landmarks > length.
Tensor nystrom_forward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& layout,
                       std::int64_t landmarks, std::int64_t pinv_iterations, NystromCache* cache = nullptr);
QkvGrads nystrom_backward(const Tensor& q, const Tensor& k, const Tensor& v, const HeadLayout& layout,
                          std::int64_t landmarks, const NystromCache& cache, const Tensor& grad_context);

// ---------------------------------------------------------------- shifted windows

// Rows are tokens of a [height x width] grid per example; height and width
// must already be multiples of `window` (see roll_pad).
struct WindowSpec {
  std::int64_t batch = 1;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t window = 1;
  std::int64_t shift = 0;  // > 0 masks pairs that came from different regions before the cyclic shift
  std::int64_t heads = 1;
  std::int64_t head_dim = 0;
};

struct WindowCache {
  Tensor probs;  // [batch*windows*heads*w^2 x w^2]
};

// rel_bias: optional [(2w-1)^2 x heads] table.
Tensor window_forward(const Tensor& q, const Tensor& k, const Tensor& v, const WindowSpec& spec,
                      const Tensor* rel_bias = nullptr, WindowCache* cache = nullptr);

struct WindowGrads {
  QkvGrads qkv;
  Tensor rel_bias;
};
WindowGrads window_backward(const Tensor& q, const Tensor& k, const Tensor& v, const WindowSpec& spec,
                            const WindowCache& cache, const Tensor& grad_context, bool with_bias);

std::int64_t relative_position_index(std::int64_t i, std::int64_t j, std::int64_t window);

// Zero-pads a [batch x height x width] token grid (rows x channels) to
// padded dims and cyclically shifts it by -shift in both axes.
Tensor roll_pad(const Tensor& x, std::int64_t batch, std::int64_t height, std::int64_t width, std::int64_t padded_h,
                std::int64_t padded_w, std::int64_t shift);
// Inverse of roll_pad (and its adjoint): shifts by +shift and crops.
Tensor unroll_crop(const Tensor& x, std::int64_t batch, std::int64_t height, std::int64_t width,
                   std::int64_t padded_h, std::int64_t padded_w, std::int64_t shift);

// ---------------------------------------------------------------- single-head operations

// [n x d] inputs, one head.
Tensor full_attention(const Tensor& q, const Tensor& k, const Tensor& v);
// Throws ConfigError for odd windows or windows < 2.
Tensor sliding_window_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t window);
Tensor nystrom_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t landmarks,
                         std::int64_t pinv_iterations);
// [H x W x d] grids; pads internally when H or W are not multiples of the window.
Tensor shifted_window_attention_2d(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t window, bool shifted,
                                   const Tensor* rel_bias = nullptr);
// Self-attention of a grid with identity projections.
Tensor shifted_window_attention_2d(const Tensor& x, std::int64_t window, bool shifted);

}  // namespace attnprof::attn
