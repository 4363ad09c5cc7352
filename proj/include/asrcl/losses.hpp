// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "asrcl/autodiff.hpp"

namespace asrcl {

/// Temperatures and weights of the pre-training and fine-tuning objectives.
/// Defaults are the published hyperparameters.
struct LossWeights {
  double tau_c = 0.2;
  double tau_sc = 0.2;
  double tau_d = 5.0;
  double lambda_mlm = 1.0;
  double lambda_sc = 0.1;
  double lambda_d = 10.0;

  /// Throws ConfigError for a non-positive temperature or negative weight.
  void validate() const;
};

/// Row-aligned representations of manual transcripts and their ASR
/// hypotheses: row i of both comes from the same utterance.
struct ContrastiveBatch {
  Var reps_clean;
  Var reps_asr;
};

/// Representations with hard labels and previous-epoch predictions of one
/// classification head. In scenario/action mode `labels` holds the joint
/// label and one LabeledBatch is formed per head for the soft terms.
struct LabeledBatch {
  Var reps;
  std::vector<int> labels;
  Tensor prev_probs;  // [N x C], rows are probability vectors
};

/// Pair contrastive loss over the pooled 2N representations. Every directed
/// pair (clean_i, asr_i) and (asr_i, clean_i) is a positive; all other rows
/// are in-batch negatives. Averaged over the 2N anchors.
/// Throws DegenerateInputError for an empty batch.
Var pair_contrastive_loss(const ContrastiveBatch& batch, double tau_c);

/// Mean cross-entropy over masked positions; 0 when nothing is masked.
Var mlm_loss(const Var& logits, std::span<const int> targets);

/// l_c + lambda_mlm * l_mlm.
Var pretrain_loss(const Var& l_c, const Var& l_mlm, double lambda_mlm);

/// Supervised contrastive loss with same-label positives, normalized by the
/// batch size N (not by the number of positives). Anchors without a positive
/// contribute 0. Throws DegenerateInputError when N < 2.
Var hard_contrastive_loss(const Var& reps, std::span<const int> labels, double tau_sc);

/// (1/N) sum_i KL(prev_i || softmax(logits_i / tau_d)). prev_probs are
/// constants; zero entries of prev contribute exactly 0.
Var distill_loss(const Var& logits, const Tensor& prev_probs, double tau_d);

/// Soft contrastive loss: pair (i, j) weighted by prev_i . prev_j.
/// Throws DegenerateInputError when N < 2.
Var soft_contrastive_loss(const Var& reps, const Tensor& prev_probs, double tau_sc);

/// l_ce + lambda_d l_d + lambda_sc (l_hard + lambda_d l_soft).
Var finetune_loss(const Var& l_ce, const Var& l_d, const Var& l_hard, const Var& l_soft,
                  const LossWeights& w);

/// Sum over heads of the mean cross-entropy of that head.
/// Throws ConfigError when the number of heads and label sets differ.
Var multihead_cross_entropy(std::span<const Var> logits, std::span<const std::vector<int>> labels);

/// Scalar zero on `tape`; stands in for a disabled loss term.
Var zero_loss(Tape& tape);

}  // namespace asrcl
