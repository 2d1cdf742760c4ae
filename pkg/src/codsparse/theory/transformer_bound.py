"""Norm-free attention + ReLU feed-forward stacks with a feature mask shared by both sublayers.

Each trial draws one random stack.  Monte-Carlo samples of the input and the
masks estimate the energy ratio ``E||R_L||^2 / E||R_0||^2``.  The per-layer
gains use spectral norms of the sampled weights and the largest attention
matrix norm seen on the sampled trajectories, so the bound applies to every
realised sample.
"""

from __future__ import annotations

import math

import numpy as np

from ..numkernel import DomainError, Rng
from .report import TheoremCheckReport, ratio_of_means

THEOREM = "transformer_common_mask"


def _softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _spec(m: np.ndarray) -> np.ndarray:
    """Spectral norm of the trailing 2-d matrices."""
    return np.linalg.svd(m, compute_uv=False)[..., 0]


def _sample_stack(rng: Rng, d: int, depth: int, heads: int, hidden: int):
    dh = d // heads
    layers = []
    for layer in range(depth):
        r = rng.child("layer", layer)
        layers.append({
            "wq": r.child("wq").normal((heads, d, dh), 0.0, 1.0 / math.sqrt(d)),
            "wk": r.child("wk").normal((heads, d, dh), 0.0, 1.0 / math.sqrt(d)),
            "wv": r.child("wv").normal((heads, d, dh), 0.0, 1.0 / math.sqrt(d)),
            "wo": r.child("wo").normal((d, d), 0.0, 1.0 / math.sqrt(d)),
            "w1": r.child("w1").normal((d, hidden), 0.0, 1.0 / math.sqrt(d)),
            "w2": r.child("w2").normal((hidden, d), 0.0, 1.0 / math.sqrt(hidden)),
        })
    return layers


def _attention(x: np.ndarray, w: dict) -> tuple[np.ndarray, np.ndarray]:
    """x: (S, n, d) -> MHA output (S, n, d) and attention matrices (S, H, n, n)."""
    q = np.einsum("snd,hde->shne", x, w["wq"])
    k = np.einsum("snd,hde->shne", x, w["wk"])
    v = np.einsum("snd,hde->shne", x, w["wv"])
    probs = _softmax(np.einsum("shne,shme->shnm", q, k) / math.sqrt(q.shape[-1]))
    heads = np.einsum("shnm,shme->shne", probs, v)
    s, h, n, dh = heads.shape
    concat = heads.transpose(0, 2, 1, 3).reshape(s, n, h * dh)
    return concat @ w["wo"], probs


def _ffn(x: np.ndarray, w: dict) -> np.ndarray:
    return np.maximum(x @ w["w1"], 0.0) @ w["w2"]


def run_stack(layers: list[dict], r0: np.ndarray, masks: list[np.ndarray], target_alpha: float | None = None):
    """Propagate samples; returns final states, per-layer (alpha_attn, alpha_ffn) and max attention norms.

    With ``target_alpha`` the output projection and second FFN matrix of each
    layer are rescaled (before use) so both gains equal the target.
    """
    r = r0
    gains = []
    for layer, w in enumerate(layers):
        mask = masks[layer][:, None, :]
        x = r * mask
        attn, probs = _attention(x, w)
        kappa = _spec(probs).max(axis=0)  # (H,)
        nu = _spec(w["wv"])
        omega = float(_spec(w["wo"]))
        a_attn = omega ** 2 * float(np.sum(kappa ** 2 * nu ** 2))
        if target_alpha is not None and a_attn > 0:
            factor = math.sqrt(target_alpha / a_attn)
            w["wo"] = w["wo"] * factor
            attn = attn * factor
            a_attn = target_alpha
        z = r + attn
        s1, s2 = float(_spec(w["w1"])), float(_spec(w["w2"]))
        a_ffn = (s1 * s2) ** 2
        if target_alpha is not None and a_ffn > 0:
            w["w2"] = w["w2"] * math.sqrt(target_alpha / a_ffn)
            a_ffn = target_alpha
        r = z + _ffn(z * mask, w)
        gains.append((a_attn, a_ffn, kappa.tolist(), nu.tolist(), omega))
    return r, gains


def check_transformer_bound(d: int, depth: int, heads: int, p: float, trials: int = 200, seed: int = 0,
                            tokens: int = 8, samples: int = 64, hidden: int | None = None,
                            target_alpha: float | None = None, bound_scale: float = 1.0) -> list[TheoremCheckReport]:
    """One report per trial (random stack); each must satisfy its own bound."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"mask density p must lie in [0, 1], got {p}")
    if d % heads:
        raise DomainError(f"heads={heads} must divide d={d}")
    hidden = hidden or 2 * d
    reports = []
    for trial in range(trials):
        rng = Rng(seed, THEOREM, d, depth, heads, tokens, "trial", trial)
        layers = _sample_stack(rng.child("weights"), d, depth, heads, hidden)
        r0 = rng.child("input").normal((samples, tokens, d))
        masks = [rng.child("mask", p, layer).bernoulli((samples, d), p) for layer in range(depth)]
        r_final, gains = run_stack(layers, r0, masks, target_alpha)
        start = np.einsum("snd,snd->s", r0, r0)
        end = np.einsum("snd,snd->s", r_final, r_final)
        ratio, se = ratio_of_means(end, start)
        bound = bound_scale
        for a_attn, a_ffn, *_ in gains:
            bound *= (1.0 + math.sqrt(a_attn * p)) ** 2 * (1.0 + math.sqrt(a_ffn * p)) ** 2
        rep = TheoremCheckReport(
            THEOREM, {"d": d, "L": depth, "H": heads, "p": p, "n": tokens, "samples": samples, "trial": trial,
                      "target_alpha": target_alpha},
            ratio, se, bound=bound, trials=samples, seed=seed,
            extra={"alpha_attn": [g[0] for g in gains], "alpha_ffn": [g[1] for g in gains],
                   "kappa_max": max(max(g[2]) for g in gains) if gains else None,
                   "slack": bound / ratio if ratio > 0 else None})
        reports.append(rep.judge())
    return reports
