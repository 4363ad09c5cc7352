// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "asrcl/corpus.hpp"
#include "asrcl/encoder.hpp"
#include "asrcl/eval.hpp"
#include "asrcl/trainer.hpp"

namespace asrcl {

/// Model and vocabulary after pre-training, ready for fine-tuning.
struct Pretrained {
  Model model;
  Vocab vocab;
  std::vector<PretrainRecord> log;
};

/// Builds the vocabulary from both text sides of `pairs` and initializes the
/// encoder from cfg.seed. Pre-trains unless cfg.pretrain_steps is 0.
Pretrained pretrain_stage(std::span<const PairedExample> pairs, const TrainingConfig& cfg);

struct PipelineRun {
  EvalReport report;
  std::vector<PretrainRecord> pretrain_log;
  std::vector<EpochRecord> finetune_log;
};

/// Fine-tunes a copy of `base` on `train` and evaluates on `test`.
PipelineRun finetune_and_evaluate(const Pretrained& base, std::span<const PairedExample> train,
                                  std::span<const PairedExample> test, const TrainingConfig& cfg,
                                  const std::string& label);

/// Command-line entry point. Returns 0 on success, 1 on IO or runtime
/// failure and 2 on a usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace asrcl
