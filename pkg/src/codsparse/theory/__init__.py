"""Monte-Carlo checks of the variance-propagation results on idealised random systems."""

from ..numkernel import DomainError
from .averaging import (check_gqa_variance, check_moe_gradient_norm, check_moe_variance,
                        check_sequence_length_variance, collapse_spread)
from .decay import (bound_monotone_in_lambda, check_weight_decay_contraction, closed_form_variance,
                    output_bound)
from .report import BLOCK, TheoremCheckReport, ratio_of_means, variance_with_se, write_reports, write_summary_csv
from .residual import check_residual_sparsity_bound, simulate_residual
from .transformer_bound import check_transformer_bound, run_stack

THEOREMS = ("residual", "transformer", "decay", "sequence", "gqa", "moe")

DEFAULT_GRID = {
    "residual": {"d": [64], "depth": [8, 32], "alpha": [0.25, 1.0, 4.0], "p": [0.1, 0.5, 1.0]},
    "transformer": {"d": [32], "depth": [8], "heads": [4], "p": [0.0, 0.5, 1.0]},
    "decay": {"eta": [0.1], "lam": [0.0, 0.01, 0.1, 1.0]},
    "sequence": {"seq_lens": [1, 4, 16, 64, 256]},
    "gqa": {"groups": [1, 4, 16], "n": [64]},
    "moe": {"ks": [1, 2, 4, 8]},
}

QUICK_GRID = {
    "residual": {"d": [16], "depth": [4], "alpha": [1.0], "p": [0.0, 0.5]},
    "transformer": {"d": [16], "depth": [2], "heads": [2], "p": [0.0, 0.5]},
    "decay": {"eta": [0.1], "lam": [1.0]},
    "sequence": {"seq_lens": [1, 16]},
    "gqa": {"groups": [1, 4], "n": [16]},
    "moe": {"ks": [1, 4]},
}


def _product(axes: dict):
    keys = list(axes)
    points = [{}]
    for key in keys:
        points = [{**pt, key: v} for pt in points for v in axes[key]]
    return points


class GridPointError(ValueError):
    """A theorem check rejected its parameters; the message names the grid point."""


def _call(name: str, fn, point: dict, extra: dict):
    try:
        return fn(**point, **extra)
    except DomainError as exc:
        raise GridPointError(f"{name} at {point}: {exc}") from exc


def run_grid(grid: dict, seed: int = 0, trials: dict | None = None, log=None,
             self_test: bool = False) -> list[TheoremCheckReport]:
    """Run every theorem family named in ``grid``; ``trials`` overrides the per-family trial count.

    ``self_test`` zeroes every tolerance and halves every bound, so a correct
    implementation must report failures.
    """
    trials = trials or {}
    unknown = set(grid) - set(THEOREMS)
    if unknown:
        raise ValueError(f"unknown theorem families {sorted(unknown)}; expected a subset of {THEOREMS}")
    reports: list[TheoremCheckReport] = []

    def kw(name, **corrupt):
        out = {"seed": seed}
        if name in trials:
            out["trials"] = trials[name]
        if self_test:
            out.update(corrupt)
        return out

    for name in THEOREMS:
        axes = grid.get(name)
        if not axes:
            continue
        if log is not None:
            log(f"theory: {name}")
        if name == "residual":
            for pt in _product(axes):
                reports.append(_call(name, check_residual_sparsity_bound, pt,
                                     kw(name, tolerance=0.0, bound_scale=0.5)))
        elif name == "transformer":
            for pt in _product(axes):
                reports.extend(_call(name, check_transformer_bound, pt, kw(name, bound_scale=0.5)))
        elif name == "decay":
            for pt in _product(axes):
                reports.extend(_call(name, check_weight_decay_contraction, pt,
                                     kw(name, tolerance=0.0, bound_scale=0.5)))
        elif name == "sequence":
            reports.extend(_call(name, check_sequence_length_variance, {"seq_lens": axes["seq_lens"]},
                                 kw(name, tolerance=0.0)))
        elif name == "gqa":
            for n in axes.get("n", [64]):
                reports.extend(_call(name, check_gqa_variance, {"groups": axes["groups"], "n": n},
                                     kw(name, tolerance=0.0)))
        elif name == "moe":
            reports.extend(_call(name, check_moe_variance, {"ks": axes["ks"]}, kw(name, tolerance=0.0)))
            for k in axes["ks"]:
                reports.append(_call(name, check_moe_gradient_norm, {"k": k}, kw(name, bound_scale=0.5)))
    return reports


def run_default_grid(seed: int = 0, quick: bool = False, log=None) -> list[TheoremCheckReport]:
    if quick:
        return run_grid(QUICK_GRID, seed, trials={"residual": 512, "transformer": 16, "decay": 64,
                                                 "sequence": 1024, "gqa": 1024, "moe": 1024}, log=log)
    return run_grid(DEFAULT_GRID, seed, log=log)


__all__ = [
    "BLOCK", "DEFAULT_GRID", "GridPointError", "QUICK_GRID", "THEOREMS", "TheoremCheckReport", "bound_monotone_in_lambda",
    "check_gqa_variance", "check_moe_gradient_norm", "check_moe_variance", "check_residual_sparsity_bound",
    "check_sequence_length_variance", "check_transformer_bound", "check_weight_decay_contraction",
    "closed_form_variance", "collapse_spread", "output_bound", "ratio_of_means", "run_default_grid", "run_grid",
    "run_stack", "simulate_residual", "variance_with_se", "write_reports", "write_summary_csv",
]
