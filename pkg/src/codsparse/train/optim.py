"""AdamW with decoupled weight decay and a warmup-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class OptimizerError(FloatingPointError):
    """A step was rejected because some gradient entries are not finite."""


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], betas=(0.9, 0.95), eps: float = 1e-8) -> "OptimizerState":
        return cls({n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()}, 0, tuple(betas), eps)


@dataclass
class StepInfo:
    grad_norm: float
    clip_scale: float
    decayed: list[str] = field(default_factory=list)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, weight_decay: float, grad_clip: float | None = None,
               no_decay=lambda name: name.endswith("_norm")) -> tuple[dict[str, np.ndarray], OptimizerState, StepInfo]:
    """One AdamW update; returns fresh parameter arrays and a new state.

    Decay is applied first, ``W <- (1 - lr * weight_decay) * W``, then the
    bias-corrected Adam step.  Parameters for which ``no_decay(name)`` holds
    (norm gains by default) are not decayed.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    bad = [n for n in sorted(grads) if not np.all(np.isfinite(grads[n]))]
    if bad:
        detail = ", ".join(f"{n} ({int(np.sum(~np.isfinite(grads[n])))} entries)" for n in bad)
        raise OptimizerError(f"non-finite gradient at step {state.t + 1}: {detail}")
    for n, g in grads.items():
        if g.shape != params[n].shape:
            raise ValueError(f"gradient for {n} has shape {g.shape}, parameter {params[n].shape}")

    norm = global_norm(grads)
    clip = 1.0
    if grad_clip is not None and norm > grad_clip:
        clip = grad_clip / norm

    b1, b2 = state.betas
    t = state.t + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    shrink = 1.0 - lr * weight_decay
    new_params, new_m, new_v, decayed = {}, {}, {}, []
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        elif clip != 1.0:
            g = g * clip
        if weight_decay and not no_decay(name):
            w = w * shrink
            decayed.append(name)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_params[name] = w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(new_m, new_v, t, state.betas, state.eps), StepInfo(norm, clip, decayed)


def warmup_cosine(step: int, steps: int, lr_peak: float, warmup_steps: int, lr_min_ratio: float) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine down to ``lr_peak * lr_min_ratio``."""
    if not 0 <= step <= max(steps, 0):
        raise ValueError(f"step {step} outside [0, {steps}]")
    if step < warmup_steps:
        return lr_peak * step / warmup_steps
    span = steps - warmup_steps
    if span <= 0 or step == warmup_steps:
        return lr_peak
    progress = (step - warmup_steps) / span
    return lr_peak * (lr_min_ratio + (1.0 - lr_min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))
