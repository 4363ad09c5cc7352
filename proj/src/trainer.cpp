// SPDX-License-Identifier: Apache-2.0
#include "asrcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "asrcl/errors.hpp"

namespace asrcl {

// ---------------------------------------------------------------------------
// configuration

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a nonnegative integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::string fmt_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

template <class E>
struct EnumNames {
  std::vector<std::pair<E, const char*>> items;
  E parse(const std::string& key, const std::string& v) const {
    for (auto& [e, n] : items)
      if (v == n) return e;
    std::string allowed;
    for (auto& [e, n] : items) allowed += std::string(allowed.empty() ? "" : ", ") + n;
    throw ConfigError("config key '" + key + "': '" + v + "' is not one of " + allowed);
  }
  std::string name(E e) const {
    for (auto& [x, n] : items)
      if (x == e) return n;
    return "?";
  }
};

const EnumNames<PairingMode> kPairing{{{PairingMode::kCleanAsr, "clean_asr"},
                                       {PairingMode::kSimcseDropout, "simcse_dropout"}}};
const EnumNames<MlmSide> kMlmSide{{{MlmSide::kClean, "clean"}, {MlmSide::kAsr, "asr"}, {MlmSide::kBoth, "both"}}};
const EnumNames<FinetuneData> kFinetuneData{{{FinetuneData::kAsr, "asr"},
                                             {FinetuneData::kManual, "manual"},
                                             {FinetuneData::kManualPlusAsr, "manual_plus_asr"}}};
const EnumNames<LabelMode> kLabelMode{{{LabelMode::kSingle, "single"},
                                       {LabelMode::kScenarioAction, "scenario_action"}}};

struct Key {
  const char* name;
  const char* help;
  std::function<void(TrainingConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainingConfig&)> get;
};

#define ASRCL_DOUBLE_KEY(key_name, field, help)                                                           \
  Key {                                                                                               \
    key_name, help, [](TrainingConfig& c, const std::string& k, const std::string& v) { c.field = parse_double(k, v); }, \
        [](const TrainingConfig& c) { return fmt_double(c.field); }                                   \
  }
#define ASRCL_SIZE_KEY(key_name, field, help)                                                             \
  Key {                                                                                               \
    key_name, help,                                                                                       \
        [](TrainingConfig& c, const std::string& k, const std::string& v) {                           \
          c.field = static_cast<decltype(c.field)>(parse_uint(k, v));                                 \
        },                                                                                            \
        [](const TrainingConfig& c) { return std::to_string(c.field); }                               \
  }
#define ASRCL_BOOL_KEY(key_name, field, help)                                                             \
  Key {                                                                                               \
    key_name, help, [](TrainingConfig& c, const std::string& k, const std::string& v) { c.field = parse_bool(k, v); }, \
        [](const TrainingConfig& c) { return std::string(c.field ? "true" : "false"); }               \
  }
#define ASRCL_ENUM_KEY(key_name, field, table, help)                                                      \
  Key {                                                                                               \
    key_name, help, [](TrainingConfig& c, const std::string& k, const std::string& v) { c.field = table.parse(k, v); }, \
        [](const TrainingConfig& c) { return table.name(c.field); }                                   \
  }

const std::vector<Key>& key_table() {
  static const std::vector<Key> keys = {
      ASRCL_DOUBLE_KEY("tau_c", weights.tau_c, "temperature of the pair contrastive loss"),
      ASRCL_DOUBLE_KEY("tau_sc", weights.tau_sc, "temperature of the supervised contrastive losses"),
      ASRCL_DOUBLE_KEY("tau_d", weights.tau_d, "self-distillation temperature"),
      ASRCL_DOUBLE_KEY("lambda_mlm", weights.lambda_mlm, "weight of the MLM loss in pre-training"),
      ASRCL_DOUBLE_KEY("lambda_sc", weights.lambda_sc, "weight of the contrastive terms in fine-tuning"),
      ASRCL_DOUBLE_KEY("lambda_d", weights.lambda_d, "weight of the distillation terms in fine-tuning"),
      ASRCL_BOOL_KEY("use_l_c", use.contrastive, "enable the pair contrastive pre-training loss"),
      ASRCL_BOOL_KEY("use_l_mlm", use.mlm, "enable the MLM pre-training loss"),
      ASRCL_BOOL_KEY("use_l_hard", use.hard, "enable the supervised (hard-label) contrastive loss"),
      ASRCL_BOOL_KEY("use_l_soft", use.soft, "enable the soft-label contrastive loss"),
      ASRCL_BOOL_KEY("use_l_d", use.distill, "enable the self-distillation loss"),
      ASRCL_DOUBLE_KEY("mask_ratio", mask_ratio, "MLM masking probability"),
      ASRCL_SIZE_KEY("pretrain_steps", pretrain_steps, "pre-training optimizer steps"),
      ASRCL_SIZE_KEY("pretrain_batch", pretrain_batch, "pairs per pre-training batch"),
      ASRCL_DOUBLE_KEY("pretrain_lr", pretrain_lr, "pre-training learning rate"),
      ASRCL_SIZE_KEY("finetune_epochs", finetune_epochs, "maximum fine-tuning epochs"),
      ASRCL_SIZE_KEY("finetune_batch", finetune_batch, "examples per fine-tuning batch"),
      ASRCL_DOUBLE_KEY("finetune_lr", finetune_lr, "fine-tuning learning rate"),
      ASRCL_DOUBLE_KEY("beta1", beta1, "Adam first-moment decay"),
      ASRCL_DOUBLE_KEY("beta2", beta2, "Adam second-moment decay"),
      ASRCL_DOUBLE_KEY("adam_eps", adam_eps, "Adam epsilon"),
      ASRCL_DOUBLE_KEY("warmup_frac", warmup_frac, "fraction of steps with linear learning-rate warmup"),
      ASRCL_SIZE_KEY("patience", patience, "early-stopping patience in epochs"),
      ASRCL_DOUBLE_KEY("val_fraction", val_fraction, "held-out validation fraction of the training data"),
      ASRCL_SIZE_KEY("seed", seed, "random seed"),
      ASRCL_ENUM_KEY("pairing_mode", pairing, kPairing, "positive pairs: clean_asr or simcse_dropout"),
      ASRCL_ENUM_KEY("mlm_side", mlm_side, kMlmSide, "MLM input side: clean, asr or both"),
      ASRCL_ENUM_KEY("finetune_data", finetune_data, kFinetuneData, "asr, manual or manual_plus_asr"),
      ASRCL_ENUM_KEY("label_mode", label_mode, kLabelMode, "single or scenario_action"),
      ASRCL_SIZE_KEY("d_model", d_model, "encoder width"),
      ASRCL_SIZE_KEY("n_layers", n_layers, "encoder layers"),
      ASRCL_SIZE_KEY("n_heads", n_heads, "attention heads"),
      ASRCL_SIZE_KEY("d_ff", d_ff, "feed-forward width"),
      ASRCL_SIZE_KEY("max_len", max_len, "maximum sequence length including [CLS]"),
      ASRCL_DOUBLE_KEY("dropout", dropout, "dropout probability"),
      ASRCL_SIZE_KEY("min_freq", min_freq, "minimum word count for the vocabulary"),
      ASRCL_SIZE_KEY("eval_batch", eval_batch, "inference batch size"),
      Key{"buckets", "WER buckets: google, wav2vec or quartile",
          [](TrainingConfig& c, const std::string& k, const std::string& v) {
            if (v != "google" && v != "wav2vec" && v != "quartile") {
              throw ConfigError("config key '" + k + "': unknown bucket scheme '" + v + "'");
            }
            c.buckets = v;
          },
          [](const TrainingConfig& c) { return c.buckets; }},
  };
  return keys;
}

#undef ASRCL_DOUBLE_KEY
#undef ASRCL_SIZE_KEY
#undef ASRCL_BOOL_KEY
#undef ASRCL_ENUM_KEY

const Key& find_key(const std::string& key) {
  for (const auto& k : key_table())
    if (key == k.name) return k;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void TrainingConfig::set(const std::string& key, const std::string& value) {
  find_key(key).set(*this, key, trim(value));
}

std::string TrainingConfig::get(const std::string& key) const { return find_key(key).get(*this); }

const std::vector<std::string>& TrainingConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& k : key_table()) v.emplace_back(k.name);
    return v;
  }();
  return names;
}

std::string TrainingConfig::describe(const std::string& key) { return find_key(key).help; }

void TrainingConfig::validate() const {
  weights.validate();
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must be in (0, 1)");
  if (pretrain_batch < 2) throw ConfigError("pretrain_batch must be >= 2 for in-batch negatives");
  if (finetune_batch < 2) throw ConfigError("finetune_batch must be >= 2 for in-batch contrast");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(pretrain_lr > 0.0) || !(finetune_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0)) throw ConfigError("warmup_frac must be in [0, 1]");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
  if (eval_batch == 0) throw ConfigError("eval_batch must be positive");
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
}

EncoderConfig TrainingConfig::encoder_config(std::size_t vocab_size, std::vector<std::size_t> head_sizes) const {
  EncoderConfig e;
  e.vocab_size = vocab_size;
  e.d_model = d_model;
  e.n_layers = n_layers;
  e.n_heads = n_heads;
  e.d_ff = d_ff;
  e.max_len = max_len;
  e.dropout = dropout;
  e.head_sizes = std::move(head_sizes);
  e.validate();
  return e;
}

nlohmann::json TrainingConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : keys()) j[k] = get(k);
  return j;
}

TrainingConfig TrainingConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  TrainingConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

void TrainingConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config " + path.string());
  for (const auto& k : keys()) out << k << " = " << get(k) << '\n';
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"full",      "no_mlm",  "no_c",        "no_hard_soft",
                                                 "no_d_soft", "no_soft", "ce_finetune", "mlm_only_ce"};
  return names;
}

TrainingConfig apply_ablation(TrainingConfig cfg, const std::string& name) {
  if (name == "full") return cfg;
  if (name == "no_mlm") {
    cfg.use.mlm = false;
  } else if (name == "no_c") {
    cfg.use.contrastive = false;
  } else if (name == "no_hard_soft") {
    cfg.use.hard = false;
    cfg.use.soft = false;
  } else if (name == "no_d_soft") {
    cfg.use.distill = false;
    cfg.use.soft = false;
  } else if (name == "no_soft") {
    cfg.use.soft = false;
  } else if (name == "ce_finetune") {
    cfg.use.hard = cfg.use.soft = cfg.use.distill = false;
  } else if (name == "mlm_only_ce") {
    cfg.use.contrastive = false;
    cfg.use.hard = cfg.use.soft = cfg.use.distill = false;
  } else {
    throw ConfigError("unknown ablation '" + name + "'");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// optimizer

AdamOptimizer::AdamOptimizer(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps,
                             std::size_t total_steps, double warmup_frac)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  warmup_steps_ = static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

double AdamOptimizer::current_lr() const {
  if (warmup_steps_ == 0 || t_ >= warmup_steps_) return lr_;
  return lr_ * static_cast<double>(t_ + 1) / static_cast<double>(warmup_steps_);
}

void AdamOptimizer::step() {
  const double lr = current_lr();
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& val = params_[k]->value.values;
    const auto& g = params_[k]->grad.values;
    if (g.size() != val.size()) continue;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < val.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      val[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// pre-training

namespace {

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

/// Endless shuffled pass over [0, n).
class BatchSampler {
 public:
  BatchSampler(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    shuffle(order_, rng_);
  }
  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    while (out.size() < k) {
      if (pos_ == order_.size()) {
        shuffle(order_, rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  Rng& rng_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<PretrainRecord> pretrain(Model& model, const Vocab& vocab, std::span<const PairedExample> pairs,
                                     const TrainingConfig& cfg,
                                     const std::function<void(const PretrainRecord&)>& on_step) {
  cfg.validate();
  if (pairs.empty()) throw ConfigError("pretrain: no training pairs");
  if (pairs.size() < 2) throw ConfigError("pretrain: need at least 2 pairs for in-batch negatives");
  const bool use_c = cfg.use.contrastive;
  const bool use_mlm = cfg.use.mlm && cfg.weights.lambda_mlm > 0.0;
  if (!use_c && !use_mlm) throw ConfigError("pretrain: both the contrastive and MLM terms are disabled");

  const std::size_t max_len = model.config().max_len;
  std::vector<TokenSeq> clean, asr;
  clean.reserve(pairs.size());
  asr.reserve(pairs.size());
  for (const auto& p : pairs) {
    clean.push_back(encode(p.clean, vocab, max_len));
    asr.push_back(encode(p.asr, vocab, max_len));
  }
  const std::size_t batch = std::min(cfg.pretrain_batch, pairs.size());
  Rng rng(cfg.seed);
  BatchSampler sampler(pairs.size(), rng);
  AdamOptimizer opt(model.parameters(), cfg.pretrain_lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.pretrain_steps,
                    cfg.warmup_frac);
  std::vector<PretrainRecord> log;
  log.reserve(cfg.pretrain_steps);
  for (std::size_t step = 1; step <= cfg.pretrain_steps; ++step) {
    const auto idx = sampler.next(batch);
    model.zero_grad();
    Tape tape;
    Var l_c = zero_loss(tape);
    Var l_mlm = zero_loss(tape);
    if (use_c) {
      std::vector<TokenSeq> seqs;
      seqs.reserve(2 * batch);
      const auto& left = cfg.pairing == PairingMode::kSimcseDropout ? asr : clean;
      for (auto i : idx) seqs.push_back(left[i]);
      for (auto i : idx) seqs.push_back(asr[i]);
      Var reps = encode_batch(tape, model, seqs, true, rng);
      std::vector<std::size_t> first(batch), second(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        first[b] = b;
        second[b] = batch + b;
      }
      l_c = pair_contrastive_loss({ops::gather_rows(reps, first), ops::gather_rows(reps, second)},
                                  cfg.weights.tau_c);
    }
    if (use_mlm) {
      std::vector<TokenSeq> masked;
      std::vector<MaskedPosition> positions;
      std::vector<int> targets;
      auto add_side = [&](const std::vector<TokenSeq>& side) {
        for (auto i : idx) {
          MaskedSeq m = apply_mlm_mask(side[i], cfg.mask_ratio, vocab.size(), rng);
          for (std::size_t k = 0; k < m.positions.size(); ++k) {
            positions.push_back({masked.size(), m.positions[k]});
            targets.push_back(m.targets[k]);
          }
          masked.push_back(std::move(m.seq));
        }
      };
      if (cfg.mlm_side != MlmSide::kAsr) add_side(clean);
      if (cfg.mlm_side != MlmSide::kClean) add_side(asr);
      if (!positions.empty()) {
        EncodedBatch enc = forward(tape, model, masked, true, rng);
        l_mlm = mlm_loss(mlm_logits(tape, model, enc, masked, positions), targets);
      }
    }
    Var l_pt = pretrain_loss(l_c, l_mlm, use_mlm ? cfg.weights.lambda_mlm : 0.0);
    tape.backward(l_pt);
    opt.step();
    PretrainRecord rec{step, l_c.item(), l_mlm.item(), l_pt.item()};
    if (on_step) on_step(rec);
    log.push_back(rec);
  }
  return log;
}

// ---------------------------------------------------------------------------
// fine-tuning

std::vector<TrainItem> make_items(std::span<const PairedExample> examples, const LabelSpace& labels,
                                  const Vocab& vocab, std::size_t max_len, FinetuneData side) {
  std::vector<TrainItem> items;
  for (const auto& ex : examples) {
    const auto y = labels.encode(ex);
    const int joint = labels.joint(y);
    auto push = [&](const std::string& key, const std::string& text) {
      items.push_back({key, encode(text, vocab, max_len), y, joint});
    };
    switch (side) {
      case FinetuneData::kAsr:
        push(ex.id, ex.asr);
        break;
      case FinetuneData::kManual:
        push(ex.id, ex.clean);
        break;
      case FinetuneData::kManualPlusAsr:
        push(ex.id + "#manual", ex.clean);
        push(ex.id + "#asr", ex.asr);
        break;
    }
  }
  return items;
}

void PredictionCache::put(const std::string& key, Rows rows) { rows_[key] = std::move(rows); }

const PredictionCache::Rows& PredictionCache::at(const std::string& key) const {
  auto it = rows_.find(key);
  if (it == rows_.end()) {
    throw std::logic_error("prediction cache has no entry for '" + key + "' at epoch " + std::to_string(epoch_));
  }
  return it->second;
}

PredictionCache init_cache(std::span<const TrainItem> items, std::span<const std::size_t> head_sizes) {
  PredictionCache cache;
  for (const auto& it : items) {
    if (it.labels.size() != head_sizes.size()) throw ConfigError("init_cache: head count mismatch");
    PredictionCache::Rows rows;
    for (std::size_t h = 0; h < head_sizes.size(); ++h) {
      if (it.labels[h] < 0 || static_cast<std::size_t>(it.labels[h]) >= head_sizes[h]) {
        throw IndexError("init_cache: label out of range for '" + it.key + "'");
      }
      std::vector<double> row(head_sizes[h], 0.0);
      row[static_cast<std::size_t>(it.labels[h])] = 1.0;
      rows.push_back(std::move(row));
    }
    cache.put(it.key, std::move(rows));
  }
  return cache;
}

PredictionCache snapshot_predictions(const Model& model, std::span<const TrainItem> items, double tau_d,
                                     std::size_t batch_size) {
  if (!(tau_d > 0.0)) throw ConfigError("tau_d must be positive");
  PredictionCache cache;
  std::vector<TokenSeq> seqs;
  for (std::size_t start = 0; start < items.size(); start += batch_size) {
    const std::size_t end = std::min(items.size(), start + batch_size);
    seqs.clear();
    for (std::size_t i = start; i < end; ++i) seqs.push_back(items[i].seq);
    const auto logits = infer_logits(model, seqs);
    for (std::size_t i = start; i < end; ++i) {
      PredictionCache::Rows rows;
      for (const Tensor& l : logits) rows.push_back(softmax_values(l.row(i - start), tau_d));
      cache.put(items[i].key, std::move(rows));
    }
  }
  return cache;
}

namespace {

bool distill_active(const TrainingConfig& cfg) { return cfg.use.distill && cfg.weights.lambda_d > 0.0; }
bool hard_active(const TrainingConfig& cfg) { return cfg.use.hard && cfg.weights.lambda_sc > 0.0; }
bool soft_active(const TrainingConfig& cfg) {
  return cfg.use.soft && cfg.weights.lambda_sc > 0.0 && cfg.weights.lambda_d > 0.0;
}

}  // namespace

FinetuneTerms finetune_terms(Tape& tape, Model& model, std::span<const TrainItem* const> batch,
                             const PredictionCache& cache, const TrainingConfig& cfg, Rng& rng) {
  const std::size_t n = batch.size();
  const std::size_t heads = model.heads.size();
  std::vector<TokenSeq> seqs;
  seqs.reserve(n);
  for (const TrainItem* it : batch) seqs.push_back(it->seq);
  Var reps = encode_batch(tape, model, seqs, true, rng);
  auto logits = classify(tape, model, reps);

  std::vector<std::vector<int>> labels(heads, std::vector<int>(n));
  std::vector<int> joint(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (batch[i]->labels.size() != heads) throw ConfigError("item label count does not match model heads");
    for (std::size_t h = 0; h < heads; ++h) labels[h][i] = batch[i]->labels[h];
    joint[i] = batch[i]->joint;
  }

  FinetuneTerms t;
  t.l_ce = multihead_cross_entropy(logits, labels);
  t.l_d = zero_loss(tape);
  t.l_hard = zero_loss(tape);
  t.l_soft = zero_loss(tape);

  const bool use_d = distill_active(cfg);
  const bool use_soft = soft_active(cfg) && n >= 2;
  std::vector<Tensor> prev;
  if (use_d || use_soft) {
    for (std::size_t h = 0; h < heads; ++h) prev.emplace_back(std::vector<std::size_t>{n, model.config().head_sizes[h]});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& rows = cache.at(batch[i]->key);
      for (std::size_t h = 0; h < heads; ++h) {
        if (rows[h].size() != prev[h].cols()) throw std::logic_error("cached distribution has the wrong size");
        std::copy(rows[h].begin(), rows[h].end(), prev[h].row(i).begin());
      }
    }
  }
  if (use_d) {
    Var total = distill_loss(logits[0], prev[0], cfg.weights.tau_d);
    for (std::size_t h = 1; h < heads; ++h) total = ops::add(total, distill_loss(logits[h], prev[h], cfg.weights.tau_d));
    t.l_d = total;
  }
  if (hard_active(cfg) && n >= 2) t.l_hard = hard_contrastive_loss(reps, joint, cfg.weights.tau_sc);
  if (use_soft) {
    Var total = soft_contrastive_loss(reps, prev[0], cfg.weights.tau_sc);
    for (std::size_t h = 1; h < heads; ++h)
      total = ops::add(total, soft_contrastive_loss(reps, prev[h], cfg.weights.tau_sc));
    t.l_soft = total;
  }
  t.l_ft = finetune_loss(t.l_ce, t.l_d, t.l_hard, t.l_soft, cfg.weights);
  return t;
}

double exact_match_accuracy(const Model& model, std::span<const TrainItem> items, std::size_t batch_size) {
  if (items.empty()) throw ConfigError("accuracy of an empty item list");
  std::vector<TokenSeq> seqs;
  seqs.reserve(items.size());
  for (const auto& it : items) seqs.push_back(it.seq);
  const auto pred = predict(model, seqs, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < items.size(); ++i) correct += pred[i] == items[i].labels ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

FinetuneResult finetune(Model& model, const Vocab& vocab, std::span<const PairedExample> examples,
                        const LabelSpace& labels, const TrainingConfig& cfg,
                        const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (examples.size() < 2) throw ConfigError("finetune: need at least 2 examples");
  if (model.config().head_sizes != labels.head_sizes()) model.reset_heads(labels.head_sizes());

  Rng split_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, split_rng);
  std::size_t n_val = 0;
  if (cfg.val_fraction > 0.0) {
    n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(examples.size()))));
    if (n_val >= examples.size()) throw ConfigError("finetune: validation split leaves no training data");
  }
  std::vector<PairedExample> train_ex, val_ex;
  for (std::size_t k = 0; k < order.size(); ++k) (k < n_val ? val_ex : train_ex).push_back(examples[order[k]]);

  const std::size_t max_len = model.config().max_len;
  const auto train_items = make_items(train_ex, labels, vocab, max_len, cfg.finetune_data);
  const auto val_items = n_val > 0 ? make_items(val_ex, labels, vocab, max_len, FinetuneData::kAsr) : train_items;

  const auto head_sizes = labels.head_sizes();
  const bool needs_cache = distill_active(cfg) || soft_active(cfg);
  PredictionCache cache = init_cache(train_items, head_sizes);

  const std::size_t batch = std::min(cfg.finetune_batch, train_items.size());
  const std::size_t per_epoch = (train_items.size() + batch - 1) / batch;
  AdamOptimizer opt(model.parameters(), cfg.finetune_lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                    per_epoch * cfg.finetune_epochs, cfg.warmup_frac);
  Rng rng(cfg.seed);
  std::vector<std::size_t> idx(train_items.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

  FinetuneResult result;
  result.best_val = -1.0;
  Model best = model;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.finetune_epochs; ++epoch) {
    shuffle(idx, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < idx.size(); start += batch) {
      const std::size_t end = std::min(idx.size(), start + batch);
      std::vector<const TrainItem*> items;
      for (std::size_t k = start; k < end; ++k) items.push_back(&train_items[idx[k]]);
      model.zero_grad();
      Tape tape;
      FinetuneTerms t = finetune_terms(tape, model, items, cache, cfg, rng);
      tape.backward(t.l_ft);
      opt.step();
      rec.l_ce += t.l_ce.item();
      rec.l_d += t.l_d.item();
      rec.l_hard += t.l_hard.item();
      rec.l_soft += t.l_soft.item();
      rec.l_ft += t.l_ft.item();
      ++batches;
    }
    for (double* v : {&rec.l_ce, &rec.l_d, &rec.l_hard, &rec.l_soft, &rec.l_ft}) *v /= static_cast<double>(batches);

    rec.val_metric = exact_match_accuracy(model, val_items, cfg.eval_batch);
    if (rec.val_metric > result.best_val) {
      rec.improved = true;
      result.best_val = rec.val_metric;
      result.best_epoch = epoch;
      best = model;
      stale = 0;
    } else {
      ++stale;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stale >= cfg.patience) break;
    // The cache is replaced only between epochs.
    if (needs_cache && epoch < cfg.finetune_epochs) {
      cache = snapshot_predictions(model, train_items, cfg.weights.tau_d, cfg.eval_batch);
      cache.set_epoch(epoch);
    }
  }
  model = std::move(best);
  return result;
}

nlohmann::json to_json(const PretrainRecord& r) {
  return {{"step", r.step}, {"l_c", r.l_c}, {"l_mlm", r.l_mlm}, {"l_pt", r.l_pt}};
}

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},   {"l_ce", r.l_ce},         {"l_d", r.l_d},          {"l_hard", r.l_hard},
          {"l_soft", r.l_soft}, {"l_ft", r.l_ft},         {"val_metric", r.val_metric}, {"improved", r.improved}};
}

}  // namespace asrcl
