#pragma once

#include <cstdint>
#include <memory>
#include <variant>
#include <vector>

#include "attnprof/modelzoo/config.hpp"
#include "attnprof/modelzoo/params.hpp"
#include "attnprof/numkernel/tensor.hpp"

namespace attnprof {

struct TokenInput {
  std::vector<std::int32_t> ids;
};

struct WaveformInput {
  nk::Tensor samples;  // [T] at the model's sample rate
};

struct ImageInput {
  nk::Tensor pixels;  // [H x W x C]
};

using ModelInput = std::variant<TokenInput, WaveformInput, ImageInput>;

Modality input_modality(const ModelInput& input);

// Frames produced by a strided conv stack without padding; 0 when the input
// is shorter than the stack's receptive field.
std::int64_t featurizer_frames(const std::vector<ConvLayerSpec>& layers, std::int64_t samples);
std::int64_t featurizer_receptive_field(const std::vector<ConvLayerSpec>& layers);

// Token geometry of one example after padding and featurizing.
struct SequenceShape {
  std::int64_t tokens = 0;  // encoder sequence length (first stage for Swin)
  std::int64_t height = 0;  // patch grid (vision only)
  std::int64_t width = 0;
};

// Encoder length for an input of `size` (tokens, samples, or square pixel dim).
SequenceShape sequence_shape(const ModelConfig& config, std::int64_t size);

struct ForwardOutput {
  nk::Tensor hidden;  // final encoder states, [batch*tokens x d]
  nk::Tensor pooled;  // [batch x d_out] summary fed to the classification head
};

class ModelImpl;

// One of the seven encoder archetypes, built from a ModelConfig with seeded
// Gaussian weights. Every parameter and activation is allocated under its
// taxonomy tag. Inference is const and may run concurrently; train_step
// needs exclusive access.
class EncoderModel {
 public:
  EncoderModel(const ModelConfig& config, bool with_head, std::uint64_t seed = 0);
  ~EncoderModel();
  EncoderModel(EncoderModel&&) noexcept;
  EncoderModel& operator=(EncoderModel&&) noexcept;

  const ModelConfig& config() const;
  bool has_head() const;

  // Runs the encoder on `batch` copies of `input`.
  ForwardOutput forward(const ModelInput& input, std::int64_t batch = 1) const;
  SequenceShape input_shape(const ModelInput& input) const;

  // Forward plus 2-way cross-entropy against a fixed label; requires the head.
  double loss(const ModelInput& input, std::int64_t batch = 1) const;
  // Forward, loss, backward and one SGD update. Gradients stay readable until
  // the next step when `keep_grads`, otherwise they are released.
  double train_step(const ModelInput& input, std::int64_t batch = 1, float learning_rate = 1e-4f,
                    bool keep_grads = false);

  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> mutable_parameters();
  std::int64_t parameter_bytes() const;

 private:
  std::unique_ptr<ModelImpl> impl_;
};

}  // namespace attnprof
