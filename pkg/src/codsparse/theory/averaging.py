"""Variance reduction by averaging: over sequence positions, over grouped value heads,
and over the selected experts of a top-k mixture."""

from __future__ import annotations

import math

import numpy as np

from ..numkernel import DomainError, Rng
from .report import BLOCK, TheoremCheckReport, variance_with_se

SEQUENCE = "sequence_length_variance"
GQA = "gqa_variance"
MOE_OUTPUT = "moe_output_variance"
MOE_JACOBIAN = "moe_jacobian_variance"
MOE_GRADIENT = "moe_gradient_norm"


def _blocks(trials: int):
    for start in range(0, trials, BLOCK):
        yield start // BLOCK, slice(start, min(start + BLOCK, trials))


def check_sequence_length_variance(seq_lens=(1, 4, 16, 64, 256), sigma2: float = 1.0, trials: int = 4096,
                                   seed: int = 0, dim: int = 8, tolerance: float = 0.05) -> list[TheoremCheckReport]:
    """Uniform average of ``T`` i.i.d. values per coordinate; variance against ``sigma2 / T``."""
    std = math.sqrt(sigma2)
    reports = []
    for seq_len in seq_lens:
        if seq_len < 1:
            raise DomainError(f"sequence length must be >= 1, got {seq_len}")
        means = np.empty((trials, dim))
        for b, rows in _blocks(trials):
            size = rows.stop - rows.start
            h = Rng(seed, SEQUENCE, seq_len, "block", b).normal((size, seq_len, dim), 0.0, std)
            means[rows] = h.mean(axis=1)
        emp, se = variance_with_se(means)
        rep = TheoremCheckReport(SEQUENCE, {"T": seq_len, "sigma2": sigma2, "dim": dim}, emp, se,
                                 target=sigma2 / seq_len, tolerance=tolerance, trials=trials, seed=seed,
                                 extra={"var_times_T": emp * seq_len})
        reports.append(rep.judge())
    return reports


def check_gqa_variance(groups=(1, 4, 16), n: int = 64, sigma_v2: float = 1.0, trials: int = 4096, seed: int = 0,
                       dim: int = 8, tolerance: float = 0.05) -> list[TheoremCheckReport]:
    """Uniform attention where each of ``G`` groups averages its own ``n / G`` value rows, scaled by ``1 / G``.

    The same value draws are reused across ``G`` so the ratio to ``G = 1`` is a paired estimate.
    """
    for g in groups:
        if g < 1 or n % g:
            raise DomainError(f"group count {g} must divide n={n}")
    std = math.sqrt(sigma_v2)
    outputs = {g: np.empty((trials, g, dim)) for g in groups}
    baseline = np.empty((trials, dim))
    for b, rows in _blocks(trials):
        size = rows.stop - rows.start
        values = Rng(seed, GQA, n, "block", b).normal((size, n, dim), 0.0, std)
        baseline[rows] = values.mean(axis=1)
        for g in groups:
            per_group = values.reshape(size, g, n // g, dim).sum(axis=2)
            outputs[g][rows] = per_group / (g * (n // g))
    base_var = float(np.mean(baseline * baseline))
    reports = []
    for g in groups:
        emp, se = variance_with_se(outputs[g])
        target = sigma_v2 / (g * n)
        params = {"G": g, "n": n, "sigma_v2": sigma_v2, "dim": dim}
        extra = {"per_group_target": sigma_v2 / (g * g * (n // g)), "product_target": target,
                 "ratio_to_dense": emp / base_var, "ratio_target": 1.0 / g}
        rep = TheoremCheckReport(GQA, params, emp, se, target=target, tolerance=tolerance, trials=trials,
                                 seed=seed, extra=extra)
        reports.append(rep.judge())
    return reports


def check_moe_variance(ks=(1, 2, 4, 8), sigma2: float = 1.0, trials: int = 4096, seed: int = 0, dim: int = 8,
                       jacobian_var: float = 0.04, tolerance: float = 0.05) -> list[TheoremCheckReport]:
    """Output arm: mean of ``k`` i.i.d. expert outputs against ``sigma2 / k``.
    Jacobian arm: mean of ``k`` random linear-expert Jacobians, per-entry variance against ``jacobian_var / k``."""
    reports = []
    for k in ks:
        if k < 1:
            raise DomainError(f"k must be >= 1, got {k}")
        out = np.empty((trials, dim))
        jac = np.empty((trials, dim, dim))
        for b, rows in _blocks(trials):
            size = rows.stop - rows.start
            rng = Rng(seed, "moe_variance", k, "block", b)
            out[rows] = rng.child("output").normal((size, k, dim), 0.0, math.sqrt(sigma2)).mean(axis=1)
            jac[rows] = rng.child("jacobian").normal((size, k, dim, dim), 0.0, math.sqrt(jacobian_var)).mean(axis=1)
        emp, se = variance_with_se(out)
        reports.append(TheoremCheckReport(MOE_OUTPUT, {"k": k, "sigma2": sigma2, "dim": dim}, emp, se,
                                          target=sigma2 / k, tolerance=tolerance, trials=trials,
                                          seed=seed).judge())
        emp, se = variance_with_se(jac)
        reports.append(TheoremCheckReport(MOE_JACOBIAN, {"k": k, "entry_var": jacobian_var, "dim": dim}, emp, se,
                                          target=jacobian_var / k, tolerance=tolerance, trials=trials,
                                          seed=seed).judge())
    return reports


def _rmsnorm_jacobian(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    d = x.size
    rms = math.sqrt(float(x @ x) / d + eps)
    return (gain[:, None] / rms) * (np.eye(d) - np.outer(x, x) / (d * rms * rms))


def check_moe_gradient_norm(k: int = 4, d: int = 16, hidden: int = 32, trials: int = 512, seed: int = 0,
                            eps: float = 1e-5, bound_scale: float = 1.0) -> TheoremCheckReport:
    """One MoE residual layer ``y = x + (1/k) sum_i E_i(norm(x))`` on random instances.

    Checks ``||dy/dx||_2 <= 1 + (1/k) ||sum_i J_i||_2 ||J_norm||_2`` with tanh-MLP experts;
    the reported statistic is the largest ratio of the two sides, bound 1.
    """
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    ratios = np.empty(trials)
    for t in range(trials):
        rng = Rng(seed, MOE_GRADIENT, k, d, hidden, "trial", t)
        x = rng.child("x").normal((d,))
        gain = 1.0 + rng.child("gain").normal((d,), 0.0, 0.2)
        j_norm = _rmsnorm_jacobian(x, gain, eps)
        z = gain * x / math.sqrt(float(x @ x) / d + eps)
        total = np.zeros((d, d))
        for e in range(k):
            er = rng.child("expert", e)
            w1 = er.child("w1").normal((hidden, d), 0.0, 1.0 / math.sqrt(d))
            w2 = er.child("w2").normal((d, hidden), 0.0, 1.0 / math.sqrt(hidden))
            total += w2 @ ((1.0 - np.tanh(w1 @ z) ** 2)[:, None] * w1)
        full = np.eye(d) + total @ j_norm / k
        lhs = np.linalg.norm(full, 2)
        rhs = 1.0 + np.linalg.norm(total, 2) * np.linalg.norm(j_norm, 2) / k
        ratios[t] = lhs / rhs
    rep = TheoremCheckReport(MOE_GRADIENT, {"k": k, "d": d, "hidden": hidden}, float(ratios.max()), 0.0,
                             bound=bound_scale, trials=trials, seed=seed,
                             extra={"mean_ratio": float(ratios.mean())})
    return rep.judge()


def collapse_spread(reports: list[TheoremCheckReport]) -> float:
    """Largest relative deviation of ``Var * T`` from its mean across sequence-length reports."""
    scaled = np.array([r.empirical * r.params["T"] for r in reports])
    return float(np.max(np.abs(scaled - scaled.mean())) / scaled.mean())
