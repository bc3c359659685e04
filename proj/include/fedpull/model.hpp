#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedpull/tensor.hpp"

namespace fedpull {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;

struct SentencePair {
  TokenSeq source;
  TokenSeq target;

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

struct ModelConfig {
  int vocab_size = 44;
  int d_model = 32;
  int n_heads = 2;
  int enc_layers = 2;
  int dec_layers = 2;
  int d_ffn = 64;
  int max_len = 16;
  std::uint64_t seed = 1;

  /// Throws Error naming the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorSpec {
  std::string name;
  Shape shape;
};

/// Every parameter tensor implied by the config, sorted by name.
std::vector<TensorSpec> parameter_specs(const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

using TensorMap = std::map<std::string, NamedTensor>;

/// Full parameter set of the encoder-decoder. Iteration is lexicographic by
/// tensor name.
struct ModelState {
  ModelConfig config;
  TensorMap tensors;

  const NamedTensor& at(const std::string& name) const;
  std::size_t param_count() const;
  std::vector<std::string> names() const;

  friend bool operator==(const ModelState&, const ModelState&) = default;
};

/// Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)); zero biases
/// and layer-norm offsets; unit layer-norm gains.
ModelState init_model(const ModelConfig& config);

/// Mean token cross-entropy with teacher forcing.
double forward_loss(const ModelState& model,
                    std::span<const SentencePair> batch);

/// dLoss/dParam for every tensor of the model.
TensorMap backward(const ModelState& model,
                   std::span<const SentencePair> batch);

/// Flat-buffer route used by training and by the gradient check. Parameters
/// are laid out in parameter_specs order. Returns the loss and, when grad is
/// non-empty, accumulates the gradient into it.
template <typename T>
double loss_and_grad(const ModelConfig& config, std::span<const T> params,
                     std::span<const SentencePair> batch, std::span<T> grad);

std::vector<float> flatten(const ModelState& model);
std::vector<float> flatten(const TensorMap& tensors, const ModelConfig& config);
TensorMap unflatten(std::span<const float> flat, const ModelConfig& config);

enum class OptimizerKind { sgd, adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  std::int64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  TensorMap m;  // first moments, adam only, lazily created
  TensorMap v;  // second moments

  static OptimizerState adam(double lr = 1e-3);
  static OptimizerState sgd(double lr);
};

struct TrainResult {
  ModelState model;
  OptimizerState optimizer;
  std::vector<double> losses;  // one per optimizer step
};

/// `steps` optimizer updates on minibatches drawn from a seeded shuffle of the
/// corpus, reshuffled at each epoch boundary.
TrainResult train_steps(const ModelState& model, const OptimizerState& opt,
                        std::span<const SentencePair> corpus, int steps,
                        int batch_size, std::uint64_t seed);

/// BOS-seeded argmax decoding until EOS or max_len; ties go to the lowest id.
TokenSeq greedy_decode(const ModelState& model, const TokenSeq& source);

std::vector<TokenSeq> greedy_decode_all(const ModelState& model,
                                        std::span<const TokenSeq> sources);

// Checkpoint: "key=value" config lines, a blank line, then tensor records.
void write_checkpoint(std::ostream& out, const ModelState& model);
ModelState read_checkpoint(std::istream& in);

}  // namespace fedpull
