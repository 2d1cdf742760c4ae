"""Weight-decay recursion ``W <- (1 - eta lam) W - eta G`` with i.i.d. gradient noise."""

from __future__ import annotations

import math

import numpy as np

from ..numkernel import DomainError, Rng
from .report import TheoremCheckReport, variance_with_se

THEOREM = "weight_decay_contraction"


def closed_form_variance(t: int, eta: float, lam: float, sigma_g: float, var0: float) -> float:
    """Per-entry ``Var(W_t) = rho^t var0 + eta^2 sigma^2 (1 - rho^t) / (1 - rho)``, ``rho = (1 - eta lam)^2``."""
    rho = (1.0 - eta * lam) ** 2
    noise = eta * eta * sigma_g * sigma_g
    if rho == 1.0:
        return var0 + noise * t
    return rho ** t * var0 + noise * (1.0 - rho ** t) / (1.0 - rho)


def output_bound(t: int, eta: float, lam: float, sigma_g: float, var0: float, mean0_sq: float,
                 sigma_x_norm: float, entries: int) -> float:
    """``||Sigma_x||_2 ((1-eta lam)^{2t} (Var W_0 + ||E W_0||^2) + eta^2 sigma^2 / (1 - rho))``, totals over entries."""
    rho = (1.0 - eta * lam) ** 2
    steady = eta * eta * sigma_g * sigma_g / (1.0 - rho) if rho < 1.0 else float("inf")
    return sigma_x_norm * (rho ** t * (var0 * entries + mean0_sq) + steady * entries)


def simulate_decay(eta: float, lam: float, sigma_g: float, checkpoints, entries: int, seed: int,
                   var0: float = 1.0, mean0: float = 0.0, shape=(16, 16)) -> dict[int, np.ndarray]:
    """Run ``entries`` independent matrices of ``shape``; returns stacked copies at each checkpoint."""
    rng = Rng(seed, THEOREM, eta, lam, sigma_g, var0, mean0)
    w = mean0 + math.sqrt(var0) * rng.child("init").normal((entries, *shape))
    shrink = 1.0 - eta * lam
    wanted = sorted(set(int(c) for c in checkpoints))
    out = {}
    if 0 in wanted:
        out[0] = w.copy()
    for step in range(1, wanted[-1] + 1 if wanted else 0):
        g = rng.child("grad", step).normal((entries, *shape), 0.0, sigma_g)
        w = shrink * w - eta * g
        if step in wanted:
            out[step] = w.copy()
    return out


def check_weight_decay_contraction(eta: float, lam: float, sigma_g: float = 1.0, steps=(10, 100, 1000),
                                   trials: int = 256, seed: int = 0, var0: float = 1.0, mean0: float = 0.5,
                                   tolerance: float = 0.05, bound_scale: float = 1.0,
                                   shape=(16, 16)) -> list[TheoremCheckReport]:
    """Per-entry variance against the closed form at each checkpoint, plus the output-variance bound."""
    if not 0.0 <= eta * lam < 2.0:
        raise DomainError(f"eta*lambda={eta * lam} outside the stable range [0, 2)")
    entries_per = int(np.prod(shape))
    snaps = simulate_decay(eta, lam, sigma_g, steps, trials, seed, var0, mean0, shape)
    rng = Rng(seed, THEOREM, "inputs", eta, lam)
    sigma_diag = np.linspace(0.25, 1.0, shape[1])
    reports = []
    for t in sorted(snaps):
        w = snaps[t]
        mean_t = mean0 * (1.0 - eta * lam) ** t
        emp, se = variance_with_se(w, known_mean=mean_t)
        target = closed_form_variance(t, eta, lam, sigma_g, var0)
        params = {"eta": eta, "lambda": lam, "sigma_g": sigma_g, "t": t, "var0": var0, "mean0": mean0}
        reports.append(TheoremCheckReport(THEOREM, params, emp, se, target=target, tolerance=tolerance,
                                          trials=w.size, seed=seed).judge())
        # output variance u = W x with x ~ N(0, diag(sigma_diag))
        x = rng.child("x", t).normal((trials, shape[1])) * np.sqrt(sigma_diag)
        u = np.einsum("tij,tj->ti", w, x)
        u_sq = np.einsum("ti,ti->t", u, u)
        out_emp = float(u_sq.mean())
        out_se = float(u_sq.std(ddof=1) / math.sqrt(trials))
        bound = bound_scale * output_bound(t, eta, lam, sigma_g, var0, (mean0 ** 2) * entries_per,
                                           float(sigma_diag.max()), entries_per) if lam > 0 else None
        out_rep = TheoremCheckReport(THEOREM + ".output", params, out_emp, out_se, bound=bound,
                                     trials=trials, seed=seed)
        if bound is None:
            out_rep.extra["note"] = "no steady-state bound at lambda = 0"
        reports.append(out_rep.judge())
    return reports


def bound_monotone_in_lambda(eta: float, lambdas, t: int, sigma_g: float = 1.0, var0: float = 1.0,
                             mean0_sq: float = 0.0) -> tuple[bool, list[float]]:
    """Closed-form output bound over a lambda grid (0 < eta*lambda <= 1) and whether it strictly decreases."""
    lams = sorted(lambdas)
    for lam in lams:
        if not 0.0 < eta * lam <= 1.0:
            raise DomainError(f"eta*lambda={eta * lam} outside (0, 1]")
    values = [output_bound(t, eta, lam, sigma_g, var0, mean0_sq, 1.0, 1) for lam in lams]
    return all(b < a for a, b in zip(values, values[1:])), values
