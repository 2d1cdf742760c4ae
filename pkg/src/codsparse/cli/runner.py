"""Run, sweep, theorem-verification and report drivers behind the command line."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from ..effectiveness import effectiveness_report
from ..model import MoEConfig, matmul_flops_per_token
from ..model.config import ConfigError
from ..numkernel import ContractError, DegenerateError
from ..probes import probe_model
from ..theory import TheoremCheckReport, run_grid, write_reports
from ..train import read_timeline, train_run
from .config import ExperimentConfig, TheorySettings, config_from_dict, config_to_dict, dump_config

log = logging.getLogger("codsparse")

MANIFEST = "manifest.json"
COMPARISON_COLUMNS = ("run", "axis", "value", "seed", "final_loss", "last_layer_var", "s_causal", "s_perm",
                      "s_useful", "effective_layers", "wasted_layers")


class IntegrityError(RuntimeError):
    """A file no longer matches the hash recorded in its run manifest."""


class SweepError(RuntimeError):
    """A sweep child failed; completed children stay on disk."""


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(run_dir) -> Path:
    run_dir = Path(run_dir)
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != MANIFEST)
    entries = {p.relative_to(run_dir).as_posix(): sha256_file(p) for p in files}
    path = run_dir / MANIFEST
    path.write_text(json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def verify_manifest(run_dir) -> dict[str, str]:
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST
    if not path.is_file():
        raise IntegrityError(f"{path}: manifest missing")
    entries = json.loads(path.read_text(encoding="utf-8"))["files"]
    for rel, expected in entries.items():
        target = run_dir / rel
        if not target.is_file():
            raise IntegrityError(f"{target}: listed in manifest but missing")
        if sha256_file(target) != expected:
            raise IntegrityError(f"{target}: content hash does not match manifest")
    return entries


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@dataclass
class RunArtifact:
    directory: Path
    config: ExperimentConfig
    files: dict[str, str]

    def path(self, name: str) -> Path:
        return self.directory / name


def _fit_windows(cfg: ExperimentConfig) -> int:
    return math.ceil(cfg.effectiveness.fit_tokens / cfg.train.seq_len)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunArtifact:
    """Train, probe and score one config; every output lands in ``out_dir / name``."""
    root = Path(out_dir if out_dir is not None else cfg.output_dir) / cfg.name
    root.mkdir(parents=True, exist_ok=True)
    (root / MANIFEST).unlink(missing_ok=True)
    (root / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    eff = cfg.effectiveness
    fit_windows = _fit_windows(cfg) if eff.enabled else 0
    eval_windows = eff.eval_windows if eff.enabled else 0
    log.info("run %s: training %d steps", cfg.name, cfg.train.steps)
    result = train_run(cfg.model, cfg.train, root, eval_windows=eval_windows, fit_windows=fit_windows,
                       log=log.info)
    model, splits = result.model, result.splits

    try:
        report, _ = probe_model(model, splits.probe[:, :-1], cfg.probes.weight_thresholds,
                                cfg.probes.attention_thresholds, jacobian=cfg.probes.jacobian,
                                attention=cfg.probes.attention)
        probe_doc = report.to_dict()
    except (DegenerateError, ContractError) as exc:
        probe_doc = {"error": str(exc)}
    probe_doc["final_step"] = cfg.train.steps
    probe_doc["final_loss"] = result.timeline[-1]["loss"]
    probe_doc["final_ce"] = result.timeline[-1]["ce"]
    _write_json(root / "probe_report.json", probe_doc)

    if eff.enabled:
        try:
            scores = effectiveness_report(model, splits.fit, splits.eval, eff.alpha, eff.ridge)
            scores.write_matrices(root)
            eff_doc = scores.to_dict()
        except (DegenerateError, ContractError) as exc:
            eff_doc = {"error": str(exc)}
    else:
        eff_doc = {"error": "disabled"}
    _write_json(root / "effectiveness.json", eff_doc)

    if cfg.theory is not None and not cfg.theory.empty:
        reports = run_grid(cfg.theory.grid, cfg.theory.seed, cfg.theory.trials, log=log.info)
        write_reports(reports, root / "theory.json", root / "theory_summary.csv")

    write_manifest(root)
    return RunArtifact(root, cfg, verify_manifest(root))


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _value_label(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def child_config(cfg: ExperimentConfig, value, seed: int) -> ExperimentConfig:
    """Base config with the sweep axis set to ``value`` and the seed applied."""
    axis = cfg.sweep.axis
    model, train = cfg.model, cfg.train.replace(seed=seed)
    if axis == "depth":
        model = model.replace(depth=value)
    elif axis == "weight_decay":
        train = train.replace(weight_decay=float(value))
    elif axis == "seq_len":
        # equal token budget: steps scale inversely with the context, rounded down
        steps = train.steps * train.seq_len // value
        warmup = min(train.warmup_steps * train.seq_len // value, steps)
        train = train.replace(seq_len=value, steps=steps, warmup_steps=warmup)
        model = model.replace(max_seq_len=max(model.max_seq_len, value))
    elif axis == "gqa_groups":
        if model.n_heads % value:
            raise ConfigError("sweep.values", f"group size {value} does not divide n_heads={model.n_heads}")
        grouped = model.replace(n_kv_heads=model.n_heads // value)
        # equal training FLOPs: fewer K/V heads buy proportionally more steps, rounded down
        ratio = matmul_flops_per_token(model, train.seq_len) / matmul_flops_per_token(grouped, train.seq_len)
        steps = math.floor(train.steps * ratio)
        train = train.replace(steps=steps, warmup_steps=min(train.warmup_steps, steps))
        model = grouped
    elif axis == "moe":
        if value == 0:
            model = model.replace(moe=None)
        else:
            # an explicit expert width is kept; otherwise top_k experts of width mlp_hidden / top_k
            # match the dense FFN's active width
            base = model.moe or MoEConfig(n_experts=value, top_k=min(2, value))
            top_k = min(base.top_k, value)
            hidden = base.expert_hidden
            if hidden is None:
                if model.mlp_hidden % top_k:
                    raise ConfigError("sweep.values", f"top_k={top_k} does not divide mlp_hidden={model.mlp_hidden}")
                hidden = model.mlp_hidden // top_k
            moe = MoEConfig(n_experts=value, top_k=top_k, n_shared=base.n_shared, lb_coeff=base.lb_coeff,
                            z_coeff=base.z_coeff, expert_hidden=hidden)
            model = model.replace(moe=moe)
    name = f"{cfg.name}-{axis}={_value_label(value)}-s{seed}"
    raw = config_to_dict(cfg.replace(name=name, model=model, train=train, sweep=None))
    return config_from_dict(raw)


def _run_child(args):
    cfg, out_dir = args
    return run_experiment(cfg, out_dir)


def sweep(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> tuple[list[RunArtifact], Path]:
    """One run per (value, seed); writes ``comparison.csv`` with a row per child."""
    if cfg.sweep is None:
        raise ConfigError("sweep", "section missing; a sweep needs sweep.axis and sweep.values")
    root = Path(out_dir if out_dir is not None else cfg.output_dir) / cfg.name
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep_config.toml").write_text(dump_config(cfg), encoding="utf-8")
    seeds = cfg.sweep.seeds or (cfg.train.seed,)
    plan = [(v, s, child_config(cfg, v, s)) for v in cfg.sweep.values for s in seeds]
    artifacts: list[RunArtifact] = []
    failure = None
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_child, (c, root)) for _, _, c in plan]
            for fut in futures:
                try:
                    artifacts.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - recorded, sweep aborts below
                    failure = failure or exc
    else:
        for _, _, child in plan:
            try:
                artifacts.append(run_experiment(child, root))
            except Exception as exc:  # noqa: BLE001
                failure = exc
                break
    done = {a.config.name for a in artifacts}
    rows = [comparison_row(next(a for a in artifacts if a.config.name == c.name), cfg.sweep.axis, v, s)
            for v, s, c in plan if c.name in done]
    table = write_comparison(rows, root / "comparison.csv")
    if failure is not None:
        raise SweepError(f"sweep {cfg.name} aborted after {len(artifacts)} of {len(plan)} runs: {failure}") \
            from failure
    return artifacts, table


def comparison_row(artifact: RunArtifact, axis: str, value, seed: int) -> dict:
    """Numbers copied from the child's own report files."""
    probe = json.loads(artifact.path("probe_report.json").read_text(encoding="utf-8"))
    eff = json.loads(artifact.path("effectiveness.json").read_text(encoding="utf-8"))
    row = {"run": artifact.config.name, "axis": axis, "value": value, "seed": seed,
           "final_loss": probe.get("final_loss"), "last_layer_var": probe.get("last_layer_var")}
    if "error" in eff:
        row.update(s_causal=None, s_perm=None, s_useful=None, effective_layers=None, wasted_layers=None)
    else:
        row.update(s_causal=eff["causal"]["score"], s_perm=eff["permutation"]["score"],
                   s_useful=eff["usefulness"]["score"], effective_layers=eff["usefulness"]["effective_count"],
                   wasted_layers=eff["usefulness"]["wasted_count"])
    return row


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_comparison(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in COMPARISON_COLUMNS])
    return path


def read_comparison(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# theorem checks
# ---------------------------------------------------------------------------

def verify_theory(settings: TheorySettings, out_dir, name: str = "theory") -> tuple[list[TheoremCheckReport], Path]:
    """Run the requested grid; returns the reports and the summary CSV path."""
    root = Path(out_dir) / name
    root.mkdir(parents=True, exist_ok=True)
    if settings.empty:
        log.warning("theory grid is empty; nothing to check")
        reports: list[TheoremCheckReport] = []
    else:
        reports = run_grid(settings.grid, settings.seed, settings.trials, log=log.info,
                           self_test=settings.self_test)
    summary = root / "theory_summary.csv"
    write_reports(reports, root / "theory.json", summary)
    return reports, summary


# ---------------------------------------------------------------------------
# report merging
# ---------------------------------------------------------------------------

def _scalar_metrics(prefix: str, doc, out: list[tuple[str, float]]) -> None:
    if isinstance(doc, dict):
        for key in sorted(doc):
            _scalar_metrics(f"{prefix}.{key}" if prefix else key, doc[key], out)
    elif isinstance(doc, list):
        for i, item in enumerate(doc):
            _scalar_metrics(f"{prefix}[{i}]", item, out)
    elif isinstance(doc, (int, float)) and not isinstance(doc, bool):
        out.append((prefix, float(doc)))


def merge_reports(run_dirs, out_dir) -> tuple[Path, Path]:
    """Long-format ``run, step, metric, value`` tables from verified run directories."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timeline_path, scores_path = out / "timeline_long.csv", out / "scores_long.csv"
    runs = [Path(d) for d in run_dirs]
    names = [r.name for r in runs]
    if len(set(names)) != len(names):
        raise ValueError(f"run directory names must be unique, got {names}")
    for r in runs:
        verify_manifest(r)
    with timeline_path.open("w", newline="", encoding="utf-8") as tf, \
            scores_path.open("w", newline="", encoding="utf-8") as sf:
        tw = csv.writer(tf, lineterminator="\n")
        sw = csv.writer(sf, lineterminator="\n")
        tw.writerow(["run", "step", "metric", "value"])
        sw.writerow(["run", "step", "metric", "value"])
        for r in runs:
            rows = read_timeline(r / "timeline.csv")
            for row in rows:
                for metric, value in row.items():
                    if metric != "step":
                        tw.writerow([r.name, row["step"], metric, repr(float(value))])
            final_step = rows[-1]["step"] if rows else 0
            for fname, prefix in (("probe_report.json", "probe"), ("effectiveness.json", "effectiveness")):
                path = r / fname
                if not path.is_file():
                    continue
                items: list[tuple[str, float]] = []
                _scalar_metrics(prefix, json.loads(path.read_text(encoding="utf-8")), items)
                for metric, value in items:
                    sw.writerow([r.name, final_step, metric, repr(value)])
    return timeline_path, scores_path
