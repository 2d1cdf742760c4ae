"""Result records for Monte-Carlo theorem checks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BLOCK = 256  # trials per RNG substream; fixes results independently of how work is split


@dataclass
class TheoremCheckReport:
    theorem: str
    params: dict
    empirical: float
    se: float
    target: float | None = None
    bound: float | None = None
    tolerance: float = 0.0
    bound_slack_se: float = 2.0
    verdict: bool = False
    trials: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def judge(self) -> "TheoremCheckReport":
        ok = bool(np.isfinite(self.empirical))
        if self.target is not None:
            ok &= abs(self.empirical - self.target) <= self.tolerance * abs(self.target)
        if self.bound is not None:
            ok &= self.empirical <= self.bound + self.bound_slack_se * self.se
        self.verdict = bool(ok)
        return self

    @property
    def within_4se(self) -> bool | None:
        if self.target is None:
            return None
        return abs(self.empirical - self.target) <= max(self.tolerance * abs(self.target), 4 * self.se)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["within_4se"] = self.within_4se
        return _finite(out)


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def ratio_of_means(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """``mean(num) / mean(den)`` with a delta-method standard error."""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    n = num.size
    mb = den.mean()
    r = num.mean() / mb
    if n < 2:
        return float(r), float("nan")
    resid = num - r * den
    return float(r), float(np.sqrt(resid.var(ddof=1) / n) / mb)


def variance_with_se(samples: np.ndarray, known_mean: float | None = 0.0) -> tuple[float, float]:
    """Variance estimate and its standard error (from the spread of squared deviations)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    dev = x - (x.mean() if known_mean is None else known_mean)
    sq = dev * dev
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(sq.size))


def write_reports(reports: list[TheoremCheckReport], json_path=None, csv_path=None) -> None:
    if json_path is not None:
        Path(json_path).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    if csv_path is not None:
        write_summary_csv(reports, csv_path)


def write_summary_csv(reports: list[TheoremCheckReport], path) -> Path:
    """One row per grid point: theorem, parameters, statistic, target/bound, verdict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["theorem", "params", "empirical", "se", "target", "bound", "tolerance", "verdict"])
        for r in reports:
            writer.writerow([r.theorem, json.dumps(_finite(r.params), sort_keys=True), repr(r.empirical), repr(r.se),
                             "" if r.target is None else repr(r.target), "" if r.bound is None else repr(r.bound),
                             repr(r.tolerance), "pass" if r.verdict else "fail"])
    return path
