// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "asrcl/corpus.hpp"
#include "asrcl/encoder.hpp"
#include "asrcl/losses.hpp"
#include "asrcl/textproc.hpp"

namespace asrcl {

enum class PairingMode { kCleanAsr, kSimcseDropout };
enum class MlmSide { kClean, kAsr, kBoth };
enum class FinetuneData { kAsr, kManual, kManualPlusAsr };

/// Which loss terms take part. A disabled term is never evaluated and is
/// logged as exactly 0.
struct LossSwitches {
  bool contrastive = true;  // pre-training pair contrastive term
  bool mlm = true;
  bool hard = true;
  bool soft = true;
  bool distill = true;
};

struct TrainingConfig {
  LossWeights weights;
  LossSwitches use;
  double mask_ratio = 0.15;

  std::size_t pretrain_steps = 1000;
  std::size_t pretrain_batch = 32;
  double pretrain_lr = 1e-3;
  std::size_t finetune_epochs = 10;
  std::size_t finetune_batch = 32;
  double finetune_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_frac = 0.05;
  std::size_t patience = 3;
  double val_fraction = 0.1;
  std::uint64_t seed = 1;

  PairingMode pairing = PairingMode::kCleanAsr;
  MlmSide mlm_side = MlmSide::kBoth;
  FinetuneData finetune_data = FinetuneData::kAsr;
  LabelMode label_mode = LabelMode::kScenarioAction;

  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_len = 32;
  double dropout = 0.1;
  int min_freq = 1;
  std::size_t eval_batch = 256;
  std::string buckets = "quartile";

  /// Sets one key from its text form. Throws ConfigError for an unknown key
  /// or unparsable value.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();
  static std::string describe(const std::string& key);

  void validate() const;
  EncoderConfig encoder_config(std::size_t vocab_size, std::vector<std::size_t> head_sizes) const;
  nlohmann::json to_json() const;

  /// Flat "key = value" file; '#' starts a comment.
  static TrainingConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

/// Named loss configurations of the ablation study, plus two baselines:
/// "full", "no_mlm", "no_c", "no_hard_soft", "no_d_soft", "no_soft",
/// "ce_finetune" (full pre-training, cross-entropy fine-tuning) and
/// "mlm_only_ce" (MLM-only pre-training, cross-entropy fine-tuning).
const std::vector<std::string>& ablation_names();
TrainingConfig apply_ablation(TrainingConfig cfg, const std::string& name);

/// Adam with linear warmup over the first warmup_frac of the steps.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps,
                std::size_t total_steps, double warmup_frac);
  void step();
  double current_lr() const;
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t warmup_steps_;
  std::size_t t_ = 0;
};

struct PretrainRecord {
  std::size_t step = 0;
  double l_c = 0.0;
  double l_mlm = 0.0;
  double l_pt = 0.0;
};

/// Contrastive + MLM pre-training for cfg.pretrain_steps optimizer steps.
/// Throws ConfigError when the batch size is below 2 or no term is active.
std::vector<PretrainRecord> pretrain(Model& model, const Vocab& vocab, std::span<const PairedExample> pairs,
                                     const TrainingConfig& cfg,
                                     const std::function<void(const PretrainRecord&)>& on_step = {});

/// One fine-tuning input: an encoded text with per-head labels.
struct TrainItem {
  std::string key;  // prediction-cache key
  TokenSeq seq;
  std::vector<int> labels;
  int joint = 0;
};

/// Builds items from the requested text side(s). With both sides, keys are
/// suffixed "#manual" and "#asr".
std::vector<TrainItem> make_items(std::span<const PairedExample> examples, const LabelSpace& labels,
                                  const Vocab& vocab, std::size_t max_len, FinetuneData side);

/// Previous-epoch prediction distributions, per item key and head.
class PredictionCache {
 public:
  using Rows = std::vector<std::vector<double>>;  // one distribution per head

  std::size_t epoch() const { return epoch_; }
  void set_epoch(std::size_t e) { epoch_ = e; }
  void put(const std::string& key, Rows rows);
  /// Throws std::logic_error when the key is missing.
  const Rows& at(const std::string& key) const;
  bool contains(const std::string& key) const { return rows_.count(key) > 0; }
  std::size_t size() const { return rows_.size(); }

 private:
  std::size_t epoch_ = 0;
  std::unordered_map<std::string, Rows> rows_;
};

/// Exact one-hot rows of every item's labels (epoch 0).
PredictionCache init_cache(std::span<const TrainItem> items, std::span<const std::size_t> head_sizes);
/// softmax(logits / tau_d) per head, dropout off.
PredictionCache snapshot_predictions(const Model& model, std::span<const TrainItem> items, double tau_d,
                                     std::size_t batch_size = 256);

/// Recorded loss terms of one fine-tuning batch. Disabled terms are
/// constant zeros on the tape.
struct FinetuneTerms {
  Var l_ce, l_d, l_hard, l_soft, l_ft;
};

/// Builds the fine-tuning objective for one batch (dropout on).
FinetuneTerms finetune_terms(Tape& tape, Model& model, std::span<const TrainItem* const> batch,
                             const PredictionCache& cache, const TrainingConfig& cfg, Rng& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  double l_ce = 0.0, l_d = 0.0, l_hard = 0.0, l_soft = 0.0, l_ft = 0.0;
  double val_metric = 0.0;
  bool improved = false;
};

struct FinetuneResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
};

/// Fine-tunes with early stopping on validation accuracy (joint accuracy in
/// scenario/action mode) over a held-out split of `examples`. The model is
/// left at the best-validation parameters.
FinetuneResult finetune(Model& model, const Vocab& vocab, std::span<const PairedExample> examples,
                        const LabelSpace& labels, const TrainingConfig& cfg,
                        const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Fraction of items for which every head's argmax is correct.
double exact_match_accuracy(const Model& model, std::span<const TrainItem> items, std::size_t batch_size);

nlohmann::json to_json(const PretrainRecord& r);
nlohmann::json to_json(const EpochRecord& r);

}  // namespace asrcl
