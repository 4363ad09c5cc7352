// SPDX-License-Identifier: Apache-2.0
#include "asrcl/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <utility>

#include "asrcl/errors.hpp"

namespace asrcl {

namespace {

constexpr char kMagic[8] = {'A', 'S', 'R', 'C', 'L', 'C', 'K', '1'};
constexpr double kInitStd = 0.02;

Parameter gaussian(std::string name, std::vector<std::size_t> shape, Rng& rng) {
  std::normal_distribution<double> dist(0.0, kInitStd);
  Tensor t(std::move(shape));
  for (double& v : t.values) v = dist(rng);
  return Parameter(std::move(name), std::move(t));
}

Parameter filled(std::string name, std::vector<std::size_t> shape, double v) {
  return Parameter(std::move(name), Tensor(std::move(shape), v));
}

Var bind(Tape& tape, Parameter& p, Binding binding) {
  return binding == Binding::kTrainable ? tape.param(p) : tape.param(std::as_const(p));
}

Var linear(Tape& tape, const Var& x, Parameter& w, Parameter& b, Binding binding) {
  return ops::add_rowvec(ops::matmul(x, bind(tape, w, binding)), bind(tape, b, binding));
}

}  // namespace

void EncoderConfig::validate() const {
  if (vocab_size <= kNumReserved) throw ConfigError("vocab_size must exceed the reserved tokens");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) {
    throw ConfigError("encoder dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (max_len < 2) throw ConfigError("max_len must be >= 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  for (auto c : head_sizes)
    if (c == 0) throw ConfigError("classification heads need at least one class");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"d_ff", c.d_ff},       {"max_len", c.max_len},
                     {"dropout", c.dropout},       {"head_sizes", c.head_sizes}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("max_len").get_to(c.max_len);
  j.at("dropout").get_to(c.dropout);
  j.at("head_sizes").get_to(c.head_sizes);
}

Model::Model(EncoderConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const auto d = config_.d_model, f = config_.d_ff;
  tok_emb = gaussian("tok_emb", {config_.vocab_size, d}, rng);
  pos_emb = gaussian("pos_emb", {config_.max_len, d}, rng);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    EncoderLayer L;
    L.ln1_gamma = filled(p + "ln1.gamma", {d}, 1.0);
    L.ln1_beta = filled(p + "ln1.beta", {d}, 0.0);
    L.wq = gaussian(p + "attn.wq", {d, d}, rng);
    L.bq = filled(p + "attn.bq", {d}, 0.0);
    L.wk = gaussian(p + "attn.wk", {d, d}, rng);
    L.bk = filled(p + "attn.bk", {d}, 0.0);
    L.wv = gaussian(p + "attn.wv", {d, d}, rng);
    L.bv = filled(p + "attn.bv", {d}, 0.0);
    L.wo = gaussian(p + "attn.wo", {d, d}, rng);
    L.bo = filled(p + "attn.bo", {d}, 0.0);
    L.ln2_gamma = filled(p + "ln2.gamma", {d}, 1.0);
    L.ln2_beta = filled(p + "ln2.beta", {d}, 0.0);
    L.w1 = gaussian(p + "ffn.w1", {d, f}, rng);
    L.b1 = filled(p + "ffn.b1", {f}, 0.0);
    L.w2 = gaussian(p + "ffn.w2", {f, d}, rng);
    L.b2 = filled(p + "ffn.b2", {d}, 0.0);
    layers.push_back(std::move(L));
  }
  lnf_gamma = filled("lnf.gamma", {d}, 1.0);
  lnf_beta = filled("lnf.beta", {d}, 0.0);
  mlm_weight = gaussian("mlm.weight", {d, config_.vocab_size}, rng);
  mlm_bias = filled("mlm.bias", {config_.vocab_size}, 0.0);
  reset_heads(config_.head_sizes);
}

void Model::reset_heads(std::vector<std::size_t> head_sizes) {
  config_.head_sizes = std::move(head_sizes);
  config_.validate();
  heads.clear();
  for (std::size_t h = 0; h < config_.head_sizes.size(); ++h) {
    const std::string p = "heads." + std::to_string(h) + ".";
    const auto c = config_.head_sizes[h];
    heads.push_back({filled(p + "weight", {config_.d_model, c}, 0.0), filled(p + "bias", {c}, 0.0)});
  }
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out{&tok_emb, &pos_emb};
  for (auto& L : layers) {
    for (Parameter* p : {&L.ln1_gamma, &L.ln1_beta, &L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo,
                         &L.bo, &L.ln2_gamma, &L.ln2_beta, &L.w1, &L.b1, &L.w2, &L.b2})
      out.push_back(p);
  }
  for (Parameter* p : {&lnf_gamma, &lnf_beta, &mlm_weight, &mlm_bias}) out.push_back(p);
  for (auto& h : heads) {
    out.push_back(&h.weight);
    out.push_back(&h.bias);
  }
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  auto ps = const_cast<Model*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

Parameter& Model::parameter(const std::string& name) {
  for (Parameter* p : parameters())
    if (p->name == name) return *p;
  throw IndexError("no parameter named '" + name + "'");
}

void Model::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

EncodedBatch forward(Tape& tape, Model& model, std::span<const TokenSeq> seqs, bool dropout_on,
                     Rng& rng, Binding binding) {
  const auto& cfg = model.config();
  if (seqs.empty()) throw ShapeError("forward: empty batch");
  std::size_t seq_len = 0;
  for (const auto& s : seqs) {
    if (s.ids.size() > cfg.max_len || s.true_length > cfg.max_len) {
      throw ShapeError("sequence of length " + std::to_string(s.ids.size()) + " exceeds max_len " +
                       std::to_string(cfg.max_len));
    }
    if (s.true_length == 0 || s.true_length > s.ids.size()) {
      throw ShapeError("sequence true_length out of range");
    }
    seq_len = std::max(seq_len, s.true_length);
  }
  const std::size_t n = seqs.size();
  std::vector<int> tok_ids(n * seq_len, kPadId);
  std::vector<int> pos_ids(n * seq_len);
  std::vector<std::size_t> lengths(n);
  for (std::size_t b = 0; b < n; ++b) {
    lengths[b] = seqs[b].true_length;
    for (std::size_t i = 0; i < seq_len; ++i) {
      if (i < seqs[b].ids.size()) tok_ids[b * seq_len + i] = seqs[b].ids[i];
      pos_ids[b * seq_len + i] = static_cast<int>(i);
    }
  }
  const double p = dropout_on ? cfg.dropout : 0.0;
  Var x = ops::add(ops::embedding(bind(tape, model.tok_emb, binding), tok_ids),
                   ops::embedding(bind(tape, model.pos_emb, binding), pos_ids));
  x = ops::dropout(x, p, rng);
  for (auto& L : model.layers) {
    Var h = ops::layer_norm(x, bind(tape, L.ln1_gamma, binding), bind(tape, L.ln1_beta, binding));
    Var q = linear(tape, h, L.wq, L.bq, binding);
    Var k = linear(tape, h, L.wk, L.bk, binding);
    Var v = linear(tape, h, L.wv, L.bv, binding);
    Var a = ops::attention(q, k, v, lengths, seq_len, cfg.n_heads);
    x = ops::add(x, ops::dropout(linear(tape, a, L.wo, L.bo, binding), p, rng));
    Var h2 = ops::layer_norm(x, bind(tape, L.ln2_gamma, binding), bind(tape, L.ln2_beta, binding));
    Var f = linear(tape, ops::gelu(linear(tape, h2, L.w1, L.b1, binding)), L.w2, L.b2, binding);
    x = ops::add(x, ops::dropout(f, p, rng));
  }
  Var out = ops::layer_norm(x, bind(tape, model.lnf_gamma, binding), bind(tape, model.lnf_beta, binding));
  return {out, n, seq_len};
}

Var cls_rows(const EncodedBatch& enc) {
  std::vector<std::size_t> rows(enc.batch);
  for (std::size_t b = 0; b < enc.batch; ++b) rows[b] = b * enc.seq_len;
  return ops::gather_rows(enc.hidden, rows);
}

Var encode_batch(Tape& tape, Model& model, std::span<const TokenSeq> seqs, bool dropout_on, Rng& rng,
                 Binding binding) {
  return cls_rows(forward(tape, model, seqs, dropout_on, rng, binding));
}

Var mlm_logits(Tape& tape, Model& model, const EncodedBatch& enc, std::span<const TokenSeq> seqs,
               std::span<const MaskedPosition> positions, Binding binding) {
  const std::size_t v = model.config().vocab_size;
  if (positions.empty()) return tape.constant(Tensor({0, v}));
  std::vector<std::size_t> rows;
  rows.reserve(positions.size());
  for (const auto& mp : positions) {
    if (mp.seq >= enc.batch || mp.seq >= seqs.size()) {
      throw IndexError("masked position refers to sequence " + std::to_string(mp.seq) + " of " +
                       std::to_string(enc.batch));
    }
    if (mp.pos >= seqs[mp.seq].true_length) {
      throw IndexError("masked position " + std::to_string(mp.pos) + " is padding or out of range");
    }
    rows.push_back(mp.seq * enc.seq_len + mp.pos);
  }
  return linear(tape, ops::gather_rows(enc.hidden, rows), model.mlm_weight, model.mlm_bias, binding);
}

std::vector<Var> classify(Tape& tape, Model& model, const Var& reps, Binding binding) {
  std::vector<Var> out;
  for (auto& h : model.heads) out.push_back(linear(tape, reps, h.weight, h.bias, binding));
  return out;
}

Tensor represent(const Model& model, std::span<const TokenSeq> seqs) {
  Tape tape;
  Rng unused(0);
  // Frozen binding only reads parameters.
  auto& m = const_cast<Model&>(model);
  return encode_batch(tape, m, seqs, false, unused, Binding::kFrozen).value();
}

std::vector<Tensor> infer_logits(const Model& model, std::span<const TokenSeq> seqs) {
  Tape tape;
  Rng unused(0);
  auto& m = const_cast<Model&>(model);
  Var reps = encode_batch(tape, m, seqs, false, unused, Binding::kFrozen);
  std::vector<Tensor> out;
  for (const Var& l : classify(tape, m, reps, Binding::kFrozen)) out.push_back(l.value());
  return out;
}

std::vector<std::vector<int>> predict(const Model& model, std::span<const TokenSeq> seqs,
                                      std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("predict: batch_size must be positive");
  std::vector<std::vector<int>> out;
  out.reserve(seqs.size());
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    const auto chunk = seqs.subspan(start, std::min(batch_size, seqs.size() - start));
    const auto logits = infer_logits(model, chunk);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      std::vector<int> row;
      for (const Tensor& l : logits) {
        const auto r = l.row(i);
        row.push_back(static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin()));
      }
      out.push_back(std::move(row));
    }
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab,
                     const nlohmann::json& meta) {
  nlohmann::json header;
  header["format"] = "asrcl-checkpoint";
  header["version"] = 1;
  header["config"] = model.config();
  header["vocab"] = vocab.tokens();
  header["vocab_min_freq"] = vocab.min_freq();
  header["meta"] = meta;
  auto& table = header["parameters"] = nlohmann::json::array();
  for (const Parameter* p : model.parameters()) {
    table.push_back({{"name", p->name}, {"shape", p->value.shape}});
  }
  const TokenSeq probe = encode(kProbeSentence, vocab, model.config().max_len);
  header["probe"] = {{"text", kProbeSentence},
                     {"vector", represent(model, std::span<const TokenSeq>(&probe, 1)).values}};

  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = h.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const Parameter* p : model.parameters()) {
    out.write(reinterpret_cast<const char*>(p->value.values.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ParseError(path.string() + ": not a checkpoint file");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": bad header: " + e.what());
  }

  Checkpoint ck;
  ck.vocab = Vocab::from_tokens(header.at("vocab").get<std::vector<std::string>>(),
                                header.value("vocab_min_freq", 1));
  ck.model = Model(header.at("config").get<EncoderConfig>(), 0);
  ck.meta = header.value("meta", nlohmann::json::object());
  const auto& table = header.at("parameters");
  auto params = ck.model.parameters();
  if (table.size() != params.size()) throw ParseError(path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (table[i].at("name").get<std::string>() != params[i]->name ||
        table[i].at("shape").get<std::vector<std::size_t>>() != params[i]->value.shape) {
      throw ParseError(path.string() + ": unexpected parameter " + table[i].dump());
    }
    in.read(reinterpret_cast<char*>(params[i]->value.values.data()),
            static_cast<std::streamsize>(params[i]->value.size() * sizeof(double)));
    if (!in) throw ParseError(path.string() + ": truncated parameter data");
  }

  const auto& probe = header.at("probe");
  const TokenSeq seq = encode(probe.at("text").get<std::string>(), ck.vocab, ck.model.config().max_len);
  const Tensor now = represent(ck.model, std::span<const TokenSeq>(&seq, 1));
  const auto saved = probe.at("vector").get<std::vector<double>>();
  if (saved.size() != now.size()) throw ParseError(path.string() + ": probe size mismatch");
  for (std::size_t i = 0; i < saved.size(); ++i) {
    if (std::abs(saved[i] - now.values[i]) > 1e-6) {
      throw ParseError(path.string() + ": probe representation does not reproduce");
    }
  }
  return ck;
}

}  // namespace asrcl
