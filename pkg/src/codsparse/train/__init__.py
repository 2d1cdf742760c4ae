"""Byte-level corpus handling, AdamW, and the training loop."""

from .corpus import CorpusError, Windows, load_corpus, make_windows, synthetic_text
from .loop import (
    TrainConfig,
    TrainResult,
    lr_at,
    make_splits,
    read_timeline,
    timeline_columns,
    train_run,
    write_timeline,
)
from .optim import OptimizerError, OptimizerState, adamw_step, global_norm, warmup_cosine

__all__ = [
    "CorpusError",
    "OptimizerError",
    "OptimizerState",
    "TrainConfig",
    "TrainResult",
    "Windows",
    "adamw_step",
    "global_norm",
    "load_corpus",
    "lr_at",
    "make_splits",
    "make_windows",
    "read_timeline",
    "synthetic_text",
    "timeline_columns",
    "train_run",
    "warmup_cosine",
    "write_timeline",
]
