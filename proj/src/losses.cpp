// SPDX-License-Identifier: Apache-2.0
#include "asrcl/losses.hpp"

#include <cmath>
#include <string>

#include "asrcl/errors.hpp"

namespace asrcl {

namespace {

void require_positive(double t, const char* what) {
  if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError(std::string(what) + " must be positive");
}

void check_prob_rows(const Tensor& p, std::size_t n, const char* op) {
  if (p.rank() != 2 || p.rows() != n) {
    throw ShapeError(std::string(op) + ": prev_probs must have one row per example, got " +
                     shape_str(p.shape));
  }
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (double v : p.row(r)) {
      if (v < 0.0) throw ConfigError(std::string(op) + ": negative probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw ConfigError(std::string(op) + ": prev_probs row " + std::to_string(r) + " sums to " +
                        std::to_string(s));
    }
  }
}

// -(1/N) sum_{i, j != i} w_ij log softmax_{k != i}(s_ik / tau)[j]
Var weighted_pair_loss(const Var& reps, const Tensor& weights, double tau, double norm) {
  Var sims = ops::scale(ops::cosine_matrix(reps), 1.0 / tau);
  Var logp = ops::log_softmax_offdiag(sims);
  return ops::scale(ops::weighted_sum(logp, weights), -1.0 / norm);
}

}  // namespace

void LossWeights::validate() const {
  require_positive(tau_c, "tau_c");
  require_positive(tau_sc, "tau_sc");
  require_positive(tau_d, "tau_d");
  if (lambda_mlm < 0.0 || lambda_sc < 0.0 || lambda_d < 0.0) {
    throw ConfigError("loss weights must be nonnegative");
  }
}

Var pair_contrastive_loss(const ContrastiveBatch& batch, double tau_c) {
  require_positive(tau_c, "tau_c");
  const Tensor& c = batch.reps_clean.value();
  const Tensor& a = batch.reps_asr.value();
  if (c.rank() != 2 || !c.same_shape(a)) {
    throw ShapeError("pair_contrastive_loss: clean and asr representations must be equal-shape matrices");
  }
  const std::size_t n = c.rows();
  if (n == 0) throw DegenerateInputError("pair_contrastive_loss: empty batch");
  Var pooled = ops::concat_rows(batch.reps_clean, batch.reps_asr);
  Tensor w({2 * n, 2 * n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    w(i, n + i) = 1.0;
    w(n + i, i) = 1.0;
  }
  return weighted_pair_loss(pooled, w, tau_c, static_cast<double>(2 * n));
}

Var mlm_loss(const Var& logits, std::span<const int> targets) {
  if (targets.empty()) {
    if (logits.value().size() != 0) throw ShapeError("mlm_loss: logits without targets");
    return zero_loss(logits.tape());
  }
  return ops::cross_entropy(logits, targets);
}

Var pretrain_loss(const Var& l_c, const Var& l_mlm, double lambda_mlm) {
  return ops::add(l_c, ops::scale(l_mlm, lambda_mlm));
}

Var hard_contrastive_loss(const Var& reps, std::span<const int> labels, double tau_sc) {
  require_positive(tau_sc, "tau_sc");
  const std::size_t n = reps.value().rows();
  if (reps.value().rank() != 2 || n < 2) {
    throw DegenerateInputError("hard_contrastive_loss: need at least 2 examples");
  }
  if (labels.size() != n) throw ShapeError("hard_contrastive_loss: one label per row required");
  Tensor w({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && labels[i] == labels[j]) w(i, j) = 1.0;
  return weighted_pair_loss(reps, w, tau_sc, static_cast<double>(n));
}

Var distill_loss(const Var& logits, const Tensor& prev_probs, double tau_d) {
  require_positive(tau_d, "tau_d");
  const Tensor& lv = logits.value();
  if (lv.rank() != 2) throw ShapeError("distill_loss: logits must be a matrix");
  const std::size_t n = lv.rows();
  if (n == 0) throw ShapeError("distill_loss: empty batch");
  check_prob_rows(prev_probs, n, "distill_loss");
  if (prev_probs.cols() != lv.cols()) throw ShapeError("distill_loss: class count mismatch");
  // KL(p || q) = sum p log p - sum p log q, with 0 log 0 = 0.
  double entropy_term = 0.0;
  for (double p : prev_probs.values)
    if (p > 0.0) entropy_term += p * std::log(p);
  Var cross = ops::weighted_sum(ops::log_softmax(logits, tau_d), prev_probs);
  return ops::scale(ops::add_scalar(ops::scale(cross, -1.0), entropy_term), 1.0 / static_cast<double>(n));
}

Var soft_contrastive_loss(const Var& reps, const Tensor& prev_probs, double tau_sc) {
  require_positive(tau_sc, "tau_sc");
  const std::size_t n = reps.value().rows();
  if (reps.value().rank() != 2 || n < 2) {
    throw DegenerateInputError("soft_contrastive_loss: need at least 2 examples");
  }
  check_prob_rows(prev_probs, n, "soft_contrastive_loss");
  Tensor w({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < prev_probs.cols(); ++c) dot += prev_probs(i, c) * prev_probs(j, c);
      w(i, j) = dot;
    }
  }
  return weighted_pair_loss(reps, w, tau_sc, static_cast<double>(n));
}

Var finetune_loss(const Var& l_ce, const Var& l_d, const Var& l_hard, const Var& l_soft,
                  const LossWeights& w) {
  Var contrastive = ops::add(l_hard, ops::scale(l_soft, w.lambda_d));
  return ops::add(ops::add(l_ce, ops::scale(l_d, w.lambda_d)), ops::scale(contrastive, w.lambda_sc));
}

Var multihead_cross_entropy(std::span<const Var> logits, std::span<const std::vector<int>> labels) {
  if (logits.size() != labels.size()) {
    throw ConfigError("multihead_cross_entropy: " + std::to_string(logits.size()) + " heads but " +
                      std::to_string(labels.size()) + " label sets");
  }
  if (logits.empty()) throw ConfigError("multihead_cross_entropy: no heads");
  Var total = ops::cross_entropy(logits[0], labels[0]);
  for (std::size_t h = 1; h < logits.size(); ++h) total = ops::add(total, ops::cross_entropy(logits[h], labels[h]));
  return total;
}

Var zero_loss(Tape& tape) { return tape.constant(Tensor::scalar(0.0)); }

}  // namespace asrcl
