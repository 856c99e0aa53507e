# Copyright 2026 The flythinker Authors.
# SPDX-License-Identifier: Apache-2.0
"""Think-while-generating: a Reasoner and a Generator decoding in lockstep."""

from ._flythinker import (
    ConfigError,
    Error,
    Model,
    bleu,
    config_hash,
    generate_corpus_jsonl,
    rouge1,
    rougeL,
    run_cli,
    segment_eval,
    vocabulary,
)

__all__ = [
    "ConfigError",
    "Error",
    "Model",
    "bleu",
    "config_hash",
    "generate_corpus_jsonl",
    "rouge1",
    "rougeL",
    "run_cli",
    "segment_eval",
    "vocabulary",
]
