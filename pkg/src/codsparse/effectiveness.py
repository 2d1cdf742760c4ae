"""Layer-effectiveness scores: causal influence of skipping a layer, sensitivity to
swapping two layers, and usefulness measured against a fitted affine stand-in."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import Capture, Model, forward, loss, replace_layer_linear_forward, skip_layer_forward, swap_layers
from .numkernel import ContractError
from .probes import _clean

DEFAULT_ALPHA = 0.1
DEFAULT_RIDGE = 1e-6


def _inputs(batch) -> np.ndarray:
    arr = np.asarray(batch)
    return arr[None] if arr.ndim == 1 else arr


def _require_depth(model: Model) -> int:
    depth = model.config.depth
    if depth < 2:
        raise ContractError(f"layer-effectiveness scores need at least 2 layers, got {depth}")
    return depth


# ---------------------------------------------------------------------------
# causal
# ---------------------------------------------------------------------------

@dataclass
class CausalPart:
    matrix: np.ndarray  # (L, L); entry [s, l] defined for l > s, NaN elsewhere or when undefined
    score: float
    undefined_cells: int
    per_source: list[float] = field(default_factory=list)


def _deltas(states: list[np.ndarray]) -> list[np.ndarray]:
    """Per-sequence flattened updates h_{l+1} - h_l, each of shape (B, T*d)."""
    return [(states[i + 1] - states[i]).reshape(states[i].shape[0], -1) for i in range(len(states) - 1)]


def causal_matrix(base_states: list[np.ndarray], skip_states: list[list[np.ndarray]]) -> tuple[np.ndarray, int]:
    depth = len(base_states) - 1
    base = _deltas(base_states)
    mat = np.full((depth, depth), np.nan)
    undefined = 0
    for s in range(depth):
        alt = _deltas(skip_states[s])
        for layer in range(s + 1, depth):
            denom = np.linalg.norm(base[layer], axis=1)
            ok = denom > 0
            if not ok.any():
                undefined += 1
                continue
            num = np.linalg.norm(base[layer] - alt[layer], axis=1)
            mat[s, layer] = float(np.mean(num[ok] / denom[ok]))
    return mat, undefined


def aggregate_causal(mat: np.ndarray) -> tuple[float, list[float]]:
    """``(1/sqrt(N)) (1/N) sum_s mean_{l > s} C(s, l)``; empty or undefined brackets add 0."""
    n = mat.shape[0]
    per_source = []
    for s in range(n):
        row = mat[s, s + 1:]
        row = row[np.isfinite(row)]
        per_source.append(float(row.mean()) if row.size else 0.0)
    return float(sum(per_source) / n / math.sqrt(n)), per_source


def causal_score(model: Model, batch) -> CausalPart:
    depth = _require_depth(model)
    inputs = _inputs(batch)
    frozen = model.frozen()
    _, trace = forward(frozen, inputs, Capture(hidden=True))
    base = trace.hidden_states
    skips = [skip_layer_forward(frozen, inputs, s).hidden_states for s in range(depth)]
    mat, undefined = causal_matrix(base, skips)
    score, per_source = aggregate_causal(mat)
    return CausalPart(mat, score, undefined, per_source)


# ---------------------------------------------------------------------------
# permutation
# ---------------------------------------------------------------------------

@dataclass
class PermutationPart:
    matrix: np.ndarray  # symmetric (L, L), NaN on the diagonal
    score: float
    baseline_loss: float


def permutation_score(model: Model, batch) -> PermutationPart:
    """Relative cross-entropy change for every swapped pair, averaged over pairs."""
    depth = _require_depth(model)
    frozen = model.frozen()
    base = loss(frozen, batch).cross_entropy
    if base == 0:
        raise ContractError("baseline loss is exactly 0; relative change undefined")
    mat = np.full((depth, depth), np.nan)
    total = 0.0
    for a in range(depth):
        for b in range(a + 1, depth):
            swapped = loss(swap_layers(frozen, a, b), batch).cross_entropy
            p = abs(base - swapped) / abs(base)
            mat[a, b] = mat[b, a] = p
            total += p
    return PermutationPart(mat, 2.0 * total / (depth * (depth - 1)), base)


# ---------------------------------------------------------------------------
# usefulness
# ---------------------------------------------------------------------------

@dataclass
class AffineFit:
    matrix: np.ndarray  # A, (d, d); maps x -> A x + b
    bias: np.ndarray
    residual: float  # sum of squared errors on the fit set
    identity_residual: float  # same for A = I, b = 0


def fit_affine(x: np.ndarray, y: np.ndarray, ridge: float = DEFAULT_RIDGE) -> AffineFit:
    """Least-squares ``y ~ A x + b`` with the ridge pulling ``A`` toward the identity.

    The update ``y - x`` is regressed on centred inputs with penalty
    ``delta * ||A - I||_F^2``, ``delta = ridge * trace(Xc^T Xc) / d``.  An
    identity block is therefore recovered exactly for any ridge.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
    y = np.asarray(y, dtype=np.float64).reshape(x.shape)
    n, d = x.shape
    if n < d + 1:
        raise ContractError(f"affine fit needs at least d + 1 = {d + 1} samples, got {n}")
    upd = y - x
    x_mean, u_mean = x.mean(axis=0), upd.mean(axis=0)
    xc, uc = x - x_mean, upd - u_mean
    gram = xc.T @ xc
    delta = ridge * np.trace(gram) / d
    lhs = gram + delta * np.eye(d)
    rhs = xc.T @ uc
    try:
        if ridge == 0:
            coef = np.linalg.lstsq(xc, uc, rcond=None)[0]
            if np.linalg.matrix_rank(xc) < d:
                raise np.linalg.LinAlgError("rank-deficient inputs")
        else:
            coef = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise ContractError(f"normal equations are singular ({exc}); use a positive ridge") from None
    update = coef.T
    matrix = np.eye(d) + update
    bias = u_mean - update @ x_mean
    pred = x @ matrix.T + bias
    residual = float(np.sum((pred - y) ** 2))
    return AffineFit(matrix, bias, residual, float(np.sum(upd ** 2)))


@dataclass
class UsefulnessPart:
    ratios: list[float]
    useful: list[bool]
    score: float
    effective_count: int
    wasted_count: int
    baseline_loss: float
    alpha: float
    ridge: float
    fit_tokens: int
    fit_residuals: list[float] = field(default_factory=list)
    identity_residuals: list[float] = field(default_factory=list)


def usefulness_score(model: Model, fit_batch, eval_batch, alpha: float = DEFAULT_ALPHA,
                     ridge: float = DEFAULT_RIDGE) -> UsefulnessPart:
    """Fraction of layers whose affine replacement raises eval cross-entropy by more than ``1 + alpha``."""
    depth = model.config.depth
    frozen = model.frozen()
    fit = _inputs(fit_batch)
    ev = _inputs(eval_batch)
    if fit.shape == ev.shape and np.array_equal(fit, ev):
        raise ContractError("fit and eval batches must be disjoint")
    _, trace = forward(frozen, fit[:, :-1], Capture(hidden=True))
    states = trace.hidden_states
    base = loss(frozen, ev).cross_entropy
    ratios, flags, res, ident = [], [], [], []
    for layer in range(depth):
        f = fit_affine(states[layer], states[layer + 1], ridge)
        replaced = replace_layer_linear_forward(frozen, ev, layer, f.matrix, f.bias, part="cross_entropy")
        ratio = replaced / base
        ratios.append(ratio)
        flags.append(bool(ratio > 1.0 + alpha))
        res.append(f.residual)
        ident.append(f.identity_residual)
    useful = sum(flags)
    return UsefulnessPart(ratios, flags, useful / depth, useful, depth - useful, base, alpha, ridge,
                          int(fit[:, :-1].size), res, ident)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EffectivenessReport:
    causal: CausalPart
    permutation: PermutationPart
    usefulness: UsefulnessPart

    def to_dict(self) -> dict:
        return _clean({
            "causal": {"matrix": self.causal.matrix, "score": self.causal.score,
                       "undefined_cells": self.causal.undefined_cells, "per_source": self.causal.per_source},
            "permutation": {"matrix": self.permutation.matrix, "score": self.permutation.score,
                            "baseline_loss": self.permutation.baseline_loss},
            "usefulness": asdict(self.usefulness),
        })

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def write_matrices(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return [write_matrix_csv(self.causal.matrix, out / "causal_matrix.csv"),
                write_matrix_csv(self.permutation.matrix, out / "permutation_matrix.csv")]


def write_matrix_csv(matrix: np.ndarray, path) -> Path:
    """Square grid with a header row of column indices; undefined cells are empty."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", *range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            writer.writerow([i, *("" if not np.isfinite(v) else repr(float(v)) for v in row)])
    return path


def effectiveness_report(model: Model, fit_batch, eval_batch, alpha: float = DEFAULT_ALPHA,
                         ridge: float = DEFAULT_RIDGE) -> EffectivenessReport:
    ev = _inputs(eval_batch)
    return EffectivenessReport(causal_score(model, ev[:, :-1]), permutation_score(model, ev),
                               usefulness_score(model, fit_batch, ev, alpha, ridge))
