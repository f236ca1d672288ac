#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "attnprof/modelzoo/attention.hpp"
#include "attnprof/modelzoo/config.hpp"
#include "attnprof/modelzoo/params.hpp"
#include "attnprof/numkernel/kernels.hpp"

namespace attnprof::detail {

using nk::Tensor;

// Owns every parameter of a model; initialisation draws come from one seeded stream.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

  Parameter* normal(std::string name, LayerTag tag, nk::Shape shape, float stddev = 0.02f);
  Parameter* constant(std::string name, LayerTag tag, nk::Shape shape, float value);

  std::vector<std::unique_ptr<Parameter>>& all() { return params_; }
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }

 private:
  std::mt19937_64 rng_;
  std::vector<std::unique_ptr<Parameter>> params_;
};

// Lazily allocates the gradient under the parameter's own tag.
Tensor& grad_of(Parameter& p);

struct Linear {
  Parameter* weight = nullptr;  // [in x out]
  Parameter* bias = nullptr;    // [out] or null

  static Linear make(ParamStore& store, const std::string& name, LayerTag tag, std::int64_t in, std::int64_t out,
                     bool with_bias = true);
  Tensor forward(const Tensor& x) const;
  // Accumulates parameter gradients; returns dL/dx unless `need_grad_x` is false.
  Tensor backward(const Tensor& x, const Tensor& grad_y, bool need_grad_x = true) const;
};

struct LayerNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  float eps = 1e-5f;

  static LayerNorm make(ParamStore& store, const std::string& name, LayerTag tag, std::int64_t width, float eps);
  Tensor forward(const Tensor& x, nk::NormStats* stats = nullptr) const;
  Tensor backward(const Tensor& x, const nk::NormStats& stats, const Tensor& grad_y) const;
  // Group norm with one channel per group over a [C x T] signal.
  Tensor forward_channels(const Tensor& x, nk::NormStats* stats = nullptr) const;
  Tensor backward_channels(const Tensor& x, const nk::NormStats& stats, const Tensor& grad_y) const;
};

// Geometry of one block invocation.
struct BlockGeometry {
  attn::HeadLayout layout;
  // sliding window
  attn::SlidingSpec sliding;
  // Nystrom
  std::int64_t landmarks = 0;
  std::int64_t pinv_iterations = 0;
  // shifted windows: token grid and its padded extent
  std::int64_t height = 0, width = 0, padded_h = 0, padded_w = 0;
  std::int64_t window = 0, shift = 0;
};

struct BlockCache {
  Tensor x;       // block input
  Tensor src;     // rolled and padded input (shifted windows only)
  Tensor xg;      // rows of the global tokens
  Tensor q, k, v, ctx;
  Tensor qg, kg, vg;
  Tensor bias;    // relative bias table cropped to the effective window
  attn::FullCache full;
  attn::SlidingCache sliding;
  attn::NystromCache nystrom;
  attn::WindowCache window;
  Tensor s1, h, u, act, s2;
  nk::NormStats st1, st2;
};

// Post-LN transformer block: attention, residual + LN, Linear-GELU-Linear, residual + LN.
struct Block {
  int index = 0;
  AttentionKind kind = AttentionKind::Full;
  Linear q, k, v, o;
  Linear qg, kg, vg;            // global projections (sliding window with globals)
  Parameter* rel_bias = nullptr;  // [(2w-1)^2 x heads] (shifted windows)
  std::int64_t table_window = 0;
  LayerNorm ln1, ln2;
  Linear inter, out;

  static Block make(ParamStore& store, const ModelConfig& config, int index, std::int64_t width, std::int64_t heads,
                    std::int64_t ff);
  // Consumes `x`; in inference (no cache) intermediates are released as soon as they are dead.
  Tensor forward(Tensor x, const BlockGeometry& g, BlockCache* cache) const;
  Tensor backward(const BlockGeometry& g, BlockCache& cache, const Tensor& grad_y) const;
};

}  // namespace attnprof::detail
