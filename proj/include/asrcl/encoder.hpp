// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asrcl/autodiff.hpp"
#include "asrcl/textproc.hpp"

namespace asrcl {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_len = 32;
  double dropout = 0.1;
  /// Class count per classification head; two entries in scenario/action mode.
  std::vector<std::size_t> head_sizes;

  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct EncoderLayer {
  Parameter ln1_gamma, ln1_beta;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_gamma, ln2_beta;
  Parameter w1, b1, w2, b2;
};

struct ClassifierHead {
  Parameter weight;  // [d_model x classes]
  Parameter bias;    // [classes]
};

/// Pre-layer-norm transformer encoder with learned positions, an MLM output
/// projection and any number of linear classification heads on the shared
/// [CLS] representation.
class Model {
 public:
  Model() = default;
  /// Gaussian(0, 0.02) weights, unit layer-norm gains, zero biases. Heads are
  /// zero-initialized so an untrained classifier predicts uniformly.
  Model(EncoderConfig config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }

  /// Replaces all heads with fresh zero-initialized ones.
  void reset_heads(std::vector<std::size_t> head_sizes);

  /// Every trainable tensor in a stable order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter& parameter(const std::string& name);
  void zero_grad();

  Parameter tok_emb, pos_emb;
  std::vector<EncoderLayer> layers;
  Parameter lnf_gamma, lnf_beta;
  Parameter mlm_weight, mlm_bias;
  std::vector<ClassifierHead> heads;

 private:
  EncoderConfig config_;
};

/// Final hidden states for a padded batch. `hidden` has batch*seq_len rows.
struct EncodedBatch {
  Var hidden;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
};

/// How parameters are bound on the tape. Inference binds them read-only.
enum class Binding { kTrainable, kFrozen };

/// Runs the encoder. Sequences are cut to the longest true length in the
/// batch; attention never looks at [PAD] keys, so trailing padding does not
/// change any non-pad hidden state. Throws ShapeError when a sequence is
/// longer than max_len or the batch is empty.
EncodedBatch forward(Tape& tape, Model& model, std::span<const TokenSeq> seqs, bool dropout_on,
                     Rng& rng, Binding binding = Binding::kTrainable);

/// [CLS] representations, one row per sequence: [N x d_model].
Var encode_batch(Tape& tape, Model& model, std::span<const TokenSeq> seqs, bool dropout_on, Rng& rng,
                 Binding binding = Binding::kTrainable);
Var cls_rows(const EncodedBatch& enc);

struct MaskedPosition {
  std::size_t seq = 0;
  std::size_t pos = 0;
};

/// Vocabulary logits at the given positions: [|positions| x vocab_size].
/// Zero positions give an empty (0 x vocab) tensor. Positions outside a
/// sequence's true length throw IndexError.
Var mlm_logits(Tape& tape, Model& model, const EncodedBatch& enc, std::span<const TokenSeq> seqs,
               std::span<const MaskedPosition> positions, Binding binding = Binding::kTrainable);

/// Per-head logits [N x classes_h] from representations [N x d_model].
std::vector<Var> classify(Tape& tape, Model& model, const Var& reps,
                          Binding binding = Binding::kTrainable);

/// Dropout-off [CLS] vectors without recording gradients.
Tensor represent(const Model& model, std::span<const TokenSeq> seqs);

/// Dropout-off logits of every head, without recording gradients.
std::vector<Tensor> infer_logits(const Model& model, std::span<const TokenSeq> seqs);

/// Argmax class per head for every sequence: result[i][head]. Runs in
/// chunks of `batch_size`; chunking never changes the result.
std::vector<std::vector<int>> predict(const Model& model, std::span<const TokenSeq> seqs,
                                      std::size_t batch_size = 256);

struct Checkpoint {
  Model model;
  Vocab vocab;
  /// Free-form metadata (label names, training config echo, ...).
  nlohmann::json meta;
};

/// Binary checkpoint: magic, JSON header (config, vocabulary, parameter
/// table, probe sentence and its representation, metadata), then the raw
/// little-endian doubles of every parameter in header order.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab,
                     const nlohmann::json& meta = nlohmann::json::object());
/// Loads and re-encodes the stored probe sentence; throws ParseError if the
/// result drifts from the saved vector by more than 1e-6.
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline constexpr const char* kProbeSentence = "turn on the light in the kitchen";

}  // namespace asrcl
