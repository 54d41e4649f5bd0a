#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "headprune/tape.hpp"
#include "headprune/tensor.hpp"

namespace headprune {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t n_layers = 12;
  std::size_t n_heads = 12;
  std::size_t d_model = 48;
  std::size_t d_ff = 96;
  std::size_t vocab_size = 2000;
  std::size_t max_seq_len = 32;
  std::size_t n_classes = 3;
  std::size_t type_vocab_size = 2;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t total_heads() const { return n_layers * n_heads; }
  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Aliveness of every attention head. Layers are indexed from 0 here; layer 0
/// sits directly above the embeddings (the "bottom" layer, called layer 1 in
/// policy names and reports).
class HeadMask {
 public:
  HeadMask() = default;
  HeadMask(std::size_t n_layers, std::size_t n_heads, bool alive = true);
  static HeadMask all_alive(const ModelConfig& config) {
    return HeadMask(config.n_layers, config.n_heads, true);
  }

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_heads() const { return n_heads_; }
  bool alive(std::size_t layer, std::size_t head) const;
  void set(std::size_t layer, std::size_t head, bool alive);
  void prune_layer(std::size_t layer);

  std::size_t pruned_count() const { return pruned_; }
  std::size_t alive_count() const { return n_layers_ * n_heads_ - pruned_; }
  std::size_t alive_in_layer(std::size_t layer) const;

  /// 1.0 for alive heads, 0.0 for pruned, as consumed by attention.
  std::span<const double> layer_scale(std::size_t layer) const;

  /// Throws ConfigError unless the dimensions match `config`.
  void check_matches(const ModelConfig& config) const;

  /// Row per layer, '1' alive / '0' pruned, rows joined with '/'.
  std::string to_string() const;
  static HeadMask parse(const std::string& text);

  friend bool operator==(const HeadMask& a, const HeadMask& b) {
    return a.n_layers_ == b.n_layers_ && a.n_heads_ == b.n_heads_ && a.scale_ == b.scale_;
  }

 private:
  std::size_t n_layers_ = 0;
  std::size_t n_heads_ = 0;
  std::size_t pruned_ = 0;
  std::vector<double> scale_;
};

struct LayerWeights {
  Tensor query_w, query_b;
  Tensor key_w, key_b;
  Tensor value_w, value_b;
  Tensor output_w, output_b;
  Tensor attn_norm_gain, attn_norm_bias;
  Tensor ff_in_w, ff_in_b;
  Tensor ff_out_w, ff_out_b;
  Tensor ff_norm_gain, ff_norm_bias;
};

struct EncoderWeights {
  Tensor token_embedding;     // [vocab x d]; also the tied MLM decoder
  Tensor position_embedding;  // [max_seq_len x d]
  Tensor segment_embedding;   // [type_vocab x d]
  Tensor embed_norm_gain, embed_norm_bias;
  std::vector<LayerWeights> layers;
  Tensor pooler_w, pooler_b;
  Tensor mlm_bias;  // [vocab]
  Tensor classifier_w, classifier_b;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct ConstNamedTensor {
  std::string name;
  const Tensor* tensor;
};

class EncoderModel {
 public:
  EncoderModel() = default;
  /// normal(0, 0.02) weights, zero biases, unit norm gains.
  EncoderModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  EncoderWeights& weights() { return weights_; }
  const EncoderWeights& weights() const { return weights_; }

  /// Stable, ordered parameter list; names are unique.
  std::vector<NamedTensor> parameters();
  std::vector<ConstNamedTensor> parameters() const;
  std::size_t parameter_count() const;
  static std::size_t parameter_count(const ModelConfig& config);

  /// Fresh classification head (pooler is kept).
  void reinitialize_classifier(std::uint64_t seed);

  void save(std::ostream& out) const;
  static EncoderModel load(std::istream& in);
  void save(const std::string& path) const;
  static EncoderModel load(const std::string& path);

  friend bool operator==(const EncoderModel& a, const EncoderModel& b);

 private:
  ModelConfig config_;
  EncoderWeights weights_;
};

/// A padded batch of sequences, row-major [size x seq].
struct Batch {
  std::size_t size = 0;
  std::size_t seq = 0;
  std::vector<int> tokens;
  std::vector<int> segments;
  std::vector<std::uint8_t> valid;  // 0 at padding positions

  /// Pads `sequences` to the longest one with `pad_id`.
  static Batch from_sequences(std::span<const std::vector<int>> sequences,
                              std::span<const std::vector<int>> segments, int pad_id);
};

/// Per-layer attention probabilities, each [batch x heads x seq x seq].
struct AttentionCapture {
  std::vector<Tensor> layers;
};

/// One forward (and optionally backward) pass over a model. Owns its tape, so
/// independent passes over the same immutable model may run concurrently.
class ModelPass {
 public:
  ModelPass(const EncoderModel& model, bool record_gradients = true);

  Tape& tape() { return tape_; }
  const EncoderModel& model() const { return model_; }

  Var param(std::size_t index) const { return params_[index]; }

  /// Gradients aligned with model.parameters(); zeros where none arrived.
  std::vector<Tensor> gradients() const;

 private:
  const EncoderModel& model_;
  Tape tape_;
  std::vector<Var> params_;
};

/// Hidden states [size*seq x d_model]. Padding keys receive zero attention.
/// Each pruned head's context is multiplied by zero before the output
/// projection.
Var forward(ModelPass& pass, const Batch& batch, const HeadMask& mask,
            AttentionCapture* capture = nullptr);

/// First-token hidden state through the tanh pooler: [size x d_model].
Var pooled(ModelPass& pass, Var hidden, const Batch& batch);

/// Classification logits [size x n_classes].
Var classify(ModelPass& pass, const Batch& batch, const HeadMask& mask);

/// MLM logits at the flat positions (b*seq + s) given, [n x vocab]; all
/// positions when `positions` is empty. Decoder = token_embedding^T + bias.
Var mlm_logits(ModelPass& pass, const Batch& batch, const HeadMask& mask,
               std::span<const std::size_t> positions = {});

/// Mean cross-entropy at the selected positions; a constant 0 when none.
Var mlm_loss(ModelPass& pass, const Batch& batch, const HeadMask& mask,
             std::span<const std::size_t> positions, std::span<const int> targets);

/// Runs backward and returns gradients aligned with model.parameters().
/// Throws std::logic_error if any pruned head's attention slices carry a
/// nonzero gradient.
std::vector<Tensor> backward_masked(ModelPass& pass, Var loss, const HeadMask& mask);

/// True if every Q/K/V column, bias entry and output-projection row of
/// (layer, head) is zero in the given gradient set.
bool head_gradient_is_zero(const EncoderModel& model, std::span<const Tensor> grads,
                           std::size_t layer, std::size_t head);

/// Copies the values of one head's Q/K/V/output slices, for freeze checks.
std::vector<double> head_parameters(const EncoderModel& model, std::size_t layer,
                                    std::size_t head);

}  // namespace headprune
