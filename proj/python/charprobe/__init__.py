"""Character-knowledge probing for small transformer language models."""

from ._core import (
    AttentionResult,
    Checkpoint,
    Model,
    ModelConfig,
    Tokenizer,
    attention_to_target,
    attribute,
    build_manifest,
    build_prompt,
    cross_validate,
    detect_breakthrough,
    filter_vocabulary,
    make_synthetic_vocab,
    position_prompt,
    read_checkpoint,
    read_trace,
    read_vocab_file,
    retention_percent,
    run,
    score_prediction,
    spell_out,
    spelled_prompt,
    write_trace,
    write_vocab_file,
)

__all__ = [
    "AttentionResult",
    "Checkpoint",
    "Model",
    "ModelConfig",
    "Tokenizer",
    "attention_to_target",
    "attribute",
    "build_manifest",
    "build_prompt",
    "cross_validate",
    "detect_breakthrough",
    "filter_vocabulary",
    "make_synthetic_vocab",
    "position_prompt",
    "read_checkpoint",
    "read_trace",
    "read_vocab_file",
    "retention_percent",
    "run",
    "score_prediction",
    "spell_out",
    "spelled_prompt",
    "write_trace",
    "write_vocab_file",
]
