# SPDX-License-Identifier: Apache-2.0
"""Contrastive pre-training and self-distilled fine-tuning for noisy transcripts.

The heavy lifting lives in the C++ extension ``asrcl._asrcl``; this package
re-exports it.
"""

from ._asrcl import (
    ConfigError,
    DegenerateInputError,
    ParseError,
    ShapeError,
    ablation_names,
    add_noise,
    align_words,
    bucket_name,
    config_keys,
    default_config,
    distill_loss,
    finetune_loss,
    hard_contrastive_loss,
    mlm_loss,
    pair_contrastive_loss,
    run_cli,
    soft_contrastive_loss,
    toy_corpus,
    wer,
)

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "ParseError",
    "ShapeError",
    "ablation_names",
    "add_noise",
    "align_words",
    "bucket_name",
    "config_keys",
    "default_config",
    "distill_loss",
    "finetune_loss",
    "hard_contrastive_loss",
    "mlm_loss",
    "pair_contrastive_loss",
    "run_cli",
    "soft_contrastive_loss",
    "toy_corpus",
    "wer",
]
