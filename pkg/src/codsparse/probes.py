"""Instantaneous diagnostics of a model snapshot: hidden-state variance, weight and
attention sparsity, attention entropy, kurtosis and block-Jacobian deviation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import Capture, Model, block_jacobian, forward
from .numkernel import DegenerateError, DomainError, Tensor

WEIGHT_THRESHOLDS = (1e-1, 1e-2, 1e-4)
ATTENTION_THRESHOLDS = (1e-3, 1e-4, 1e-6)
DEGENERATE_M2 = 1e-12


def hidden_variance(h) -> float:
    """Population variance across the last axis per token, averaged over all tokens."""
    arr = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] < 2:
        raise DegenerateError(f"variance across dimensions needs d >= 2, got shape {arr.shape}")
    rows = arr.reshape(-1, arr.shape[-1])
    if rows.shape[0] == 0:
        raise DegenerateError("no tokens")
    centred = rows - rows.mean(axis=1, keepdims=True)
    return float(np.mean(np.mean(centred * centred, axis=1)))


def _param_arrays(params):
    if isinstance(params, Model):
        params = params.params
    values = params.values() if isinstance(params, dict) else params
    return [np.asarray(v.data if isinstance(v, Tensor) else v) for v in values]


def weight_sparsity(params, eps: float) -> float:
    """Fraction of all parameter entries with ``|w| < eps``."""
    if not eps > 0:
        raise DomainError(f"threshold must be > 0, got {eps}")
    arrays = _param_arrays(params)
    total = sum(a.size for a in arrays)
    small = sum(int(np.count_nonzero(np.abs(a) < eps)) for a in arrays)
    return small / total if total else 0.0


def _as_maps(maps) -> list[np.ndarray]:
    """Normalise to a list over layers of (B, H, T, T) arrays."""
    if isinstance(maps, np.ndarray):
        maps = [maps]
    out = []
    for a in maps:
        a = np.asarray(a, dtype=np.float64)
        while a.ndim < 4:
            a = a[None]
        out.append(a)
    return out


@dataclass
class AttentionSparsity:
    per_head: list[list[float]]  # [layer][head]
    global_mean: float
    counts: list[list[int]]  # raw counts of near-zero entries, summed over the batch


def attention_sparsity(maps, eps: float, mode: str = "literal") -> AttentionSparsity:
    """Fraction of attention weights below ``eps`` per (layer, head) and globally.

    ``literal`` divides by T*T and counts the masked upper triangle;
    ``causal_support`` only looks at ``j <= i`` and divides by T(T+1)/2.
    """
    if not eps > 0:
        raise DomainError(f"threshold must be > 0, got {eps}")
    if mode not in ("literal", "causal_support"):
        raise ValueError(f"unknown attention sparsity mode {mode!r}")
    per_head, counts = [], []
    for a in _as_maps(maps):
        b, _, t, _ = a.shape
        below = a < eps
        if mode == "causal_support":
            below = below & np.tril(np.ones((t, t), dtype=bool))
            denom = t * (t + 1) // 2
        else:
            denom = t * t
        c = below.sum(axis=(0, 2, 3))
        counts.append([int(x) for x in c])
        per_head.append([float(x) / (b * denom) for x in c])
    flat = [f for layer in per_head for f in layer]
    return AttentionSparsity(per_head, float(np.mean(flat)) if flat else 0.0, counts)


@dataclass
class AttentionEntropy:
    per_query: list[np.ndarray]  # [layer] -> (B, H, T)
    per_head: list[list[float]]
    global_mean: float


def row_entropy(rows: np.ndarray) -> np.ndarray:
    """``-sum p ln p`` over the last axis with ``0 ln 0 = 0``."""
    rows = np.asarray(rows, dtype=np.float64)
    safe = np.where(rows > 0, rows, 1.0)
    return -np.sum(np.where(rows > 0, rows * np.log(safe), 0.0), axis=-1)


def attention_entropy(maps) -> AttentionEntropy:
    per_query, per_head = [], []
    for a in _as_maps(maps):
        ent = row_entropy(a)
        per_query.append(ent)
        per_head.append([float(x) for x in ent.mean(axis=(0, 2))])
    flat = [e for layer in per_head for e in layer]
    return AttentionEntropy(per_query, per_head, float(np.mean(flat)) if flat else 0.0)


@dataclass
class Kurtosis:
    per_dim: np.ndarray  # NaN where the dimension is degenerate
    layer: float
    degenerate: list[int]


def kurtosis(h) -> Kurtosis:
    """Fourth standardized moment per dimension over tokens, and their mean.

    Dimensions with second central moment below 1e-12 are flagged and left
    out of the mean.
    """
    arr = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
    rows = arr.reshape(-1, arr.shape[-1])
    if rows.shape[0] < 2:
        raise DegenerateError(f"kurtosis needs >= 2 tokens, got {rows.shape[0]}")
    centred = rows - rows.mean(axis=0)
    sq = centred * centred
    m2 = sq.mean(axis=0)
    m4 = (sq * sq).mean(axis=0)
    ok = m2 >= DEGENERATE_M2
    if not ok.any():
        raise DegenerateError("every dimension has (near-)zero variance")
    per_dim = np.full(m2.shape, np.nan)
    per_dim[ok] = m4[ok] / (m2[ok] * m2[ok])
    return Kurtosis(per_dim, float(per_dim[ok].mean()), [int(i) for i in np.flatnonzero(~ok)])


def jacobian_deviation(model: Model, probe_batch, layer: int, position: int | None = None) -> float:
    """Mean over sequences of ``||J - I||_F`` for block ``layer``."""
    batch = np.asarray(probe_batch)
    if batch.ndim == 1:
        batch = batch[None]
    eye = np.eye(model.config.d_model)
    devs = [np.linalg.norm(block_jacobian(model, seq, layer, position) - eye) for seq in batch]
    return float(np.mean(devs))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    last_layer_var: float
    per_layer_var: list[float]
    attn_block_var: list[float]
    mlp_block_var: list[float]
    weight_sparsity: dict[str, float]
    attn_sparsity: dict[str, dict]
    attn_entropy: dict
    kurtosis: dict
    jacobian_dev: list[float] | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean(asdict(self))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def layer_variances(trace) -> list[float]:
    return [hidden_variance(r.x_out) for r in trace.layers]


def probe_model(model: Model, inputs, weight_thresholds=WEIGHT_THRESHOLDS,
                attention_thresholds=ATTENTION_THRESHOLDS, jacobian: bool = False,
                attention: bool = True, jacobian_position: int | None = None) -> tuple[ProbeReport, object]:
    """Run the full probe battery on ``inputs`` (B, T) token ids.

    Returns the report and the forward trace it was computed from.
    """
    _, trace = forward(model.frozen(), inputs, Capture(attention=attention, hidden=True))
    per_layer = layer_variances(trace)
    attn_var = [hidden_variance(r.attn_out) for r in trace.layers]
    mlp_var = [hidden_variance(r.ffn_out) for r in trace.layers]
    ws = {repr(e): weight_sparsity(model, e) for e in weight_thresholds}
    a_sp, a_ent = {}, {}
    if attention:
        maps = [r.attn_map for r in trace.layers]
        for e in attention_thresholds:
            lit = attention_sparsity(maps, e, "literal")
            sup = attention_sparsity(maps, e, "causal_support")
            a_sp[repr(e)] = {"literal": {"per_head": lit.per_head, "global": lit.global_mean},
                             "causal_support": {"per_head": sup.per_head, "global": sup.global_mean}}
        ent = attention_entropy(maps)
        a_ent = {"per_head": ent.per_head, "global": ent.global_mean}
    kurts = [kurtosis(r.x_out) for r in trace.layers]
    kdict = {"per_dim": [k.per_dim for k in kurts], "per_layer": [k.layer for k in kurts],
             "degenerate_dims": [k.degenerate for k in kurts]}
    jac = None
    if jacobian:
        jac = [jacobian_deviation(model, inputs, layer, jacobian_position) for layer in range(model.config.depth)]
    report = ProbeReport(per_layer[-1], per_layer, attn_var, mlp_var, ws, a_sp, a_ent, kdict, jac,
                         {"batch": int(np.shape(inputs)[0]), "seq_len": int(np.shape(inputs)[-1])})
    return report, trace


def write_attention_csv(attn_map: np.ndarray, path) -> Path:
    """Dense T x T grid, one row per query, no header."""
    grid = np.asarray(attn_map, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-d attention map, got shape {grid.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])
    return path
