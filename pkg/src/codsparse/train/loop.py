"""Deterministic training loop with periodic probe snapshots."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..model import Model, ModelConfig, build_model, loss, loss_and_trace, save_checkpoint
from ..model.config import ConfigError
from ..numkernel import Graph, Rng, Tensor, backward
from ..probes import hidden_variance
from .corpus import CorpusError, Windows, load_corpus, make_windows
from .optim import OptimizerState, adamw_step, warmup_cosine

PROBE_WINDOWS = 8


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int
    seq_len: int
    lr_peak: float
    weight_decay: float = 0.0
    warmup_steps: int = 0
    lr_min_ratio: float = 0.1
    grad_clip: float | None = 1.0
    seed: int = 0
    probe_every: int = 50
    corpus_path: str = "builtin:synthetic"
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    heldout_fraction: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self, prefix: str = "train") -> None:
        for name in ("steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{prefix}.{name}", "must be >= 0")
        for name in ("batch_size", "seq_len", "probe_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        if self.warmup_steps > self.steps:
            raise ConfigError(f"{prefix}.warmup_steps", f"{self.warmup_steps} exceeds steps={self.steps}")
        if not self.lr_peak > 0:
            raise ConfigError(f"{prefix}.lr_peak", f"must be > 0, got {self.lr_peak}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"{prefix}.weight_decay", "must be >= 0")
        if not 0.0 <= self.lr_min_ratio <= 1.0:
            raise ConfigError(f"{prefix}.lr_min_ratio", "must lie in [0, 1]")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"{prefix}.grad_clip", "must be > 0 when set")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ConfigError(f"{prefix}.heldout_fraction", "must lie in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def lr_at(step: int, cfg: TrainConfig) -> float:
    return warmup_cosine(step, cfg.steps, cfg.lr_peak, cfg.warmup_steps, cfg.lr_min_ratio)


@dataclass
class Splits:
    windows: Windows
    probe: np.ndarray  # (8, T + 1)
    eval: np.ndarray
    fit: np.ndarray


def make_splits(cfg: TrainConfig, eval_windows: int = 0, fit_windows: int = 0) -> Splits:
    """Held-out tail holds the probe batch, then the eval and fit batches, in that order."""
    tokens = load_corpus(cfg.corpus_path)
    need = PROBE_WINDOWS + eval_windows + fit_windows
    total = (tokens.size - 1) // cfg.seq_len
    heldout = max(need, math.ceil(cfg.heldout_fraction * total))
    windows = make_windows(tokens, cfg.seq_len, heldout)
    if windows.train_idx.size < cfg.batch_size:
        raise CorpusError(f"corpus yields {windows.train_idx.size} training windows, batch needs {cfg.batch_size}")
    probe = windows.heldout(0, PROBE_WINDOWS)
    ev = windows.heldout(PROBE_WINDOWS, eval_windows) if eval_windows else probe[:0]
    fit = windows.heldout(PROBE_WINDOWS + eval_windows, fit_windows) if fit_windows else probe[:0]
    return Splits(windows, probe, ev, fit)


TIMELINE_FIXED = ("step", "lr", "loss", "ce", "lb", "z", "last_layer_var")


def timeline_columns(depth: int) -> list[str]:
    return [*TIMELINE_FIXED, *(f"var_{i}" for i in range(depth)), "grad_norm"]


def probe_row(model: Model, probe: np.ndarray, step: int, lr: float, grad_norm: float) -> dict:
    parts, trace = loss_and_trace(model.frozen(), probe)
    variances = [hidden_variance(r.x_out) for r in trace.layers]
    row = {"step": step, "lr": lr, "loss": parts.total.item(), "ce": parts.cross_entropy,
           "lb": parts.load_balance, "z": parts.router_z, "last_layer_var": variances[-1]}
    row.update({f"var_{i}": v for i, v in enumerate(variances)})
    row["grad_norm"] = grad_norm
    return row


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def write_timeline(rows: list[dict], depth: int, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = timeline_columns(depth)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in cols])
    return path


def read_timeline(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in reader]


@dataclass
class TrainResult:
    model: Model
    timeline: list[dict]
    splits: Splits
    final_train_loss: float = float("nan")
    extras: dict = field(default_factory=dict)


def train_run(model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None, *,
              eval_windows: int = 0, fit_windows: int = 0, log=None) -> TrainResult:
    """Train from a seeded initialisation; probe on the held-out batch every ``probe_every`` steps.

    With ``out_dir`` the timeline CSV and final checkpoint are written there.
    """
    cfg = train_cfg
    if cfg.seq_len > model_cfg.max_seq_len:
        raise ConfigError("train.seq_len", f"{cfg.seq_len} exceeds model.max_seq_len={model_cfg.max_seq_len}")
    splits = make_splits(cfg, eval_windows, fit_windows)
    root = Rng(cfg.seed)
    model = build_model(model_cfg, root.child("init"))
    params = {n: t.data for n, t in model.params.items()}
    state = OptimizerState.zeros_like(params, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    timeline = [probe_row(model, splits.probe, 0, lr_at(0, cfg), float("nan"))]
    n_train = splits.windows.train_idx.size
    last_loss = float("nan")
    for step in range(1, cfg.steps + 1):
        lr = lr_at(step, cfg)
        idx = root.child("batch", step).integers(0, n_train, cfg.batch_size)
        batch = splits.windows.batch(splits.windows.train_idx[idx])
        leaves = {n: Tensor(p, requires_grad=True, name=n, copy=False) for n, p in params.items()}
        with Graph() as graph:
            parts = loss(Model(model_cfg, leaves), batch)
        grads_by_leaf = backward(graph, parts.total)
        grads = {n: grads_by_leaf.get(t, np.zeros(t.shape)) for n, t in leaves.items()}
        params, state, info = adamw_step(params, grads, state, lr, cfg.weight_decay, cfg.grad_clip)
        last_loss = parts.total.item()
        if step % cfg.probe_every == 0 or step == cfg.steps:
            model = Model(model_cfg, {n: Tensor(p, copy=False) for n, p in params.items()})
            timeline.append(probe_row(model, splits.probe, step, lr, info.grad_norm))
            if log is not None:
                log(f"step {step}/{cfg.steps} train_loss={last_loss:.4f} probe_loss={timeline[-1]['loss']:.4f}")
    model = Model(model_cfg, {n: Tensor(p, requires_grad=True, name=n, copy=False) for n, p in params.items()})
    if out_dir is not None:
        out = Path(out_dir)
        write_timeline(timeline, model_cfg.depth, out / "timeline.csv")
        save_checkpoint(model, out / "checkpoint.zip")
    return TrainResult(model, timeline, splits, last_loss)
