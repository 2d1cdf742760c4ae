import csv
import json
import subprocess
import sys

import pytest

from codsparse.model import ConfigError, active_param_count
from codsparse.cli import (IntegrityError, SweepError, child_config, dump_config, load_config, main,
                           merge_reports, parse_config, preset_names, preset_text, run_experiment, sweep,
                           verify_manifest)
from codsparse.cli.config import load_theory
from codsparse.cli.runner import COMPARISON_COLUMNS, read_comparison


def write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def smoke(**train):
    cfg = load_config(preset="smoke")
    return cfg.replace(train=cfg.train.replace(**train)) if train else cfg


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

class TestConfig:
    @pytest.mark.parametrize("text,field", [
        ("model.dept = 3", "model.dept"),
        ('train.steps = "many"', "train.steps"),
        ("train.steps = 2.5", "train.steps"),
        ("model.moe.top_k = 9\nmodel.moe.n_experts = 4", "model.moe.top_k"),
        ('sweep.axis = "width"\nsweep.values = [1]', "sweep.axis"),
        ('sweep.axis = "depth"\nsweep.values = [2, 2]', "sweep.values"),
        ('sweep.axis = "depth"\nsweep.values = [0]', "sweep.values[0]"),
        ("probes.weight_thresholds = [0.1, -1.0]", "probes.weight_thresholds"),
        ("effectiveness.alpha = 0", "effectiveness.alpha"),
        ('name = "a/b"', "name"),
        ("train.seq_len = 64", "train.seq_len"),
        ("colour = 1", "colour"),
    ])
    def test_errors_name_field_path(self, tmp_path, text, field):
        with pytest.raises(ConfigError) as err:
            load_config(write(tmp_path, text), "smoke")
        assert err.value.field == field

    def test_syntax_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, "model.depth = = 3"), "smoke")

    def test_missing_sections(self):
        with pytest.raises(ConfigError) as err:
            parse_config('name = "x"\nmodel.depth = 2')
        assert err.value.field == "train"
        with pytest.raises(ConfigError) as err:
            parse_config('model.depth = 2\ntrain.steps = 1')
        assert err.value.field == "model.d_model"

    @pytest.mark.parametrize("name", [n for n in preset_names() if n != "theory"])
    def test_presets_roundtrip(self, name):
        cfg = load_config(preset=name)
        assert parse_config(dump_config(cfg)) == cfg
        assert dump_config(parse_config(dump_config(cfg))) == dump_config(cfg)

    def test_file_overrides_preset(self, tmp_path):
        cfg = load_config(write(tmp_path, "train.steps = 9\nmodel.moe.n_experts = 2\nmodel.moe.top_k = 1"), "smoke")
        assert cfg.train.steps == 9 and cfg.model.moe.n_experts == 2 and cfg.model.depth == 2

    def test_none_token_for_optional(self, tmp_path):
        cfg = load_config(write(tmp_path, 'train.grad_clip = "none"'), "smoke")
        assert cfg.train.grad_clip is None
        assert 'train.grad_clip = "none"' in dump_config(cfg)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_text("huge")

    def test_theory_preset(self):
        name, _, settings = load_theory(preset="theory")
        assert name == "theory" and settings.grid["residual"]["alpha"] == [0.25, 1.0, 4.0]


class TestChildConfig:
    def test_equal_compute_seq_len(self):
        cfg = load_config(preset="seq_len")
        child = child_config(cfg, 256, 1)
        assert (child.train.seq_len, child.train.steps, child.train.warmup_steps, child.train.seed) == (256, 75, 7, 1)
        assert child.name == "seq-len-seq_len=256-s1" and child.sweep is None
        odd = child_config(cfg, 192, 0)
        assert odd.train.steps == 300 * 64 // 192 == 100

    def test_gqa_groups(self):
        cfg = load_config(preset="gqa")
        grouped, ungrouped = child_config(cfg, 16, 0), child_config(cfg, 1, 0)
        assert grouped.model.n_kv_heads == 1 and ungrouped.model.n_kv_heads == 16
        # fewer K/V projections buy more steps at equal training FLOPs
        assert ungrouped.train.steps == 300 and grouped.train.steps == 361
        assert grouped.train.weight_decay == ungrouped.train.weight_decay == 0.1
        with pytest.raises(ConfigError):
            child_config(cfg, 3, 0)

    def test_moe_active_match(self):
        cfg = load_config(preset="moe")
        assert child_config(cfg, 0, 0).model.moe is None
        moe = child_config(cfg, 4, 0).model.moe
        assert moe.top_k * moe.expert_hidden == cfg.model.mlp_hidden

    def test_moe_matched_preset_keeps_expert_width(self):
        cfg = load_config(preset="moe_matched")
        child = child_config(cfg, 32, 1).model
        assert child.d_model == 64 and child.moe.expert_hidden == 160 and child.moe.n_shared == 1
        dense = load_config(preset="moe").model.replace(moe=None)
        assert abs(active_param_count(child) - active_param_count(dense)) < 0.001 * active_param_count(dense)

    def test_weight_decay_and_depth(self):
        assert child_config(load_config(preset="weight_decay"), 0.1, 2).train.weight_decay == 0.1
        assert child_config(load_config(preset="depth"), 8, 0).model.depth == 8


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

ARTIFACTS = {"config.toml", "timeline.csv", "checkpoint.zip", "probe_report.json", "effectiveness.json",
             "causal_matrix.csv", "permutation_matrix.csv"}


class TestRun:
    def test_zero_steps(self, tmp_path):
        cfg_path = write(tmp_path, "train.steps = 0\ntrain.warmup_steps = 0")
        assert main(["run", "--preset", "smoke", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 0
        run = tmp_path / "o" / "smoke"
        files = set(verify_manifest(run))
        assert files == ARTIFACTS
        assert (run / "timeline.csv").read_text().count("\n") == 2
        assert json.loads((run / "probe_report.json").read_text())["final_step"] == 0

    def test_config_snapshot_reruns(self, tmp_path):
        first = run_experiment(smoke(), tmp_path / "a")
        again = run_experiment(load_config(first.path("config.toml")), tmp_path / "b")
        assert first.files == again.files

    def test_rerun_identical_manifest(self, tmp_path):
        a = run_experiment(smoke(), tmp_path / "a")
        b = run_experiment(smoke(), tmp_path / "b")
        assert (a.directory / "manifest.json").read_bytes() == (b.directory / "manifest.json").read_bytes()

    def test_theory_section_adds_reports(self, tmp_path):
        cfg_path = write(tmp_path, "theory.moe.ks = [1]\ntheory.trials.moe = 64")
        art = run_experiment(load_config(cfg_path, "smoke"), tmp_path)
        assert {"theory.json", "theory_summary.csv"} <= set(art.files)

    def test_seed_override(self, tmp_path, capsys):
        assert main(["run", "--preset", "smoke", "--seed", "7", "--out", str(tmp_path)]) == 0
        assert "train.seed = 7" in (tmp_path / "smoke" / "config.toml").read_text()

    def test_exit_codes(self, tmp_path, capsys):
        assert main(["run", "--config", str(write(tmp_path, "model.dept = 2")), "--preset", "smoke"]) == 2
        assert "model.dept" in capsys.readouterr().err
        assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 3
        cfg_path = write(tmp_path, f'train.corpus_path = "{tmp_path / "absent.txt"}"')
        assert main(["run", "--preset", "smoke", "--config", str(cfg_path), "--out", str(tmp_path)]) == 3

    def test_module_entry_point(self, tmp_path):
        out = subprocess.run([sys.executable, "-m", "codsparse", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "verify-theory" in out.stdout


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

class TestSweep:
    def test_single_value_matches_run(self, tmp_path):
        base = smoke()
        single = parse_config(dump_config(base) + 'sweep.axis = "weight_decay"\nsweep.values = [0.0]\n')
        arts, table = sweep(single, tmp_path / "s")
        direct = run_experiment(base, tmp_path / "r")
        assert len(arts) == 1
        for name in ("timeline.csv", "checkpoint.zip", "probe_report.json", "effectiveness.json"):
            assert arts[0].path(name).read_bytes() == direct.path(name).read_bytes()
        rows = read_comparison(table)
        assert list(rows[0]) == list(COMPARISON_COLUMNS)
        probe = json.loads(direct.path("probe_report.json").read_text())
        assert float(rows[0]["last_layer_var"]) == probe["last_layer_var"]

    def test_grid_and_seeds(self, tmp_path):
        cfg_path = write(tmp_path, 'sweep.axis = "depth"\nsweep.values = [2, 3]\nsweep.seeds = [0, 1]')
        assert main(["sweep", "--preset", "smoke", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
        rows = read_comparison(tmp_path / "smoke" / "comparison.csv")
        assert [(r["value"], r["seed"]) for r in rows] == [("2", "0"), ("2", "1"), ("3", "0"), ("3", "1")]
        assert all(int(r["effective_layers"]) + int(r["wasted_layers"]) == int(r["value"]) for r in rows)

    def test_parallel_matches_serial(self, tmp_path):
        cfg = parse_config(dump_config(smoke()) + 'sweep.axis = "moe"\nsweep.values = [0, 2]\n')
        serial, _ = sweep(cfg, tmp_path / "a", jobs=1)
        parallel, _ = sweep(cfg, tmp_path / "b", jobs=2)
        assert [a.files for a in serial] == [b.files for b in parallel]

    def test_failure_keeps_partial_artifacts(self, tmp_path):
        text = ('train.corpus_path = "builtin:synthetic:600:0"\ntrain.batch_size = 8\nmodel.max_seq_len = 32\n'
                'sweep.axis = "seq_len"\nsweep.values = [16, 32]')
        cfg = load_config(write(tmp_path, text), "smoke")
        with pytest.raises(SweepError, match="after 1 of 2"):
            sweep(cfg, tmp_path)
        rows = read_comparison(tmp_path / "smoke" / "comparison.csv")
        assert len(rows) == 1
        verify_manifest(tmp_path / "smoke" / rows[0]["run"])

    def test_missing_sweep_section(self, tmp_path):
        assert main(["sweep", "--preset", "smoke", "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------------------
# verify-theory
# ---------------------------------------------------------------------------

QUICK_THEORY = """
theory.residual.d = [16]
theory.residual.depth = [3]
theory.residual.alpha = [1.0]
theory.residual.p = [0.5]
theory.sequence.seq_lens = [1, 8]
theory.trials.residual = 4096
theory.trials.sequence = 2048
"""


class TestVerifyTheory:
    def test_pass_and_self_test(self, tmp_path, capsys):
        cfg = str(write(tmp_path, QUICK_THEORY))
        assert main(["verify-theory", "--config", cfg, "--out", str(tmp_path)]) == 0
        assert "3/3 checks passed" in capsys.readouterr().out
        rows = list(csv.DictReader((tmp_path / "theory" / "theory_summary.csv").open()))
        assert {r["verdict"] for r in rows} == {"pass"}
        assert main(["verify-theory", "--config", cfg, "--out", str(tmp_path), "--self-test"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_empty_grid_warns(self, tmp_path, caplog):
        cfg = str(write(tmp_path, 'name = "empty"'))
        assert main(["verify-theory", "--config", cfg, "--out", str(tmp_path)]) == 0
        assert "empty" in caplog.text
        assert (tmp_path / "empty" / "theory_summary.csv").read_text().count("\n") == 1

    def test_bad_grid_point(self, tmp_path, capsys):
        cfg = str(write(tmp_path, "theory.gqa.groups = [3]\ntheory.gqa.n = [64]"))
        assert main(["verify-theory", "--config", cfg, "--out", str(tmp_path)]) == 2
        assert "gqa" in capsys.readouterr().err

    def test_unknown_family(self, tmp_path):
        cfg = str(write(tmp_path, "theory.lemma.x = [1]"))
        assert main(["verify-theory", "--config", cfg, "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    a = run_experiment(smoke(), root)
    cfg = smoke(seed=3)
    b = run_experiment(cfg.replace(name="other"), root)
    return a.directory, b.directory


def long_rows(path):
    return list(csv.DictReader(path.open()))


class TestReport:
    def test_passthrough(self, two_runs, tmp_path):
        timeline, scores = merge_reports([two_runs[0]], tmp_path)
        rows = long_rows(timeline)
        source = list(csv.DictReader((two_runs[0] / "timeline.csv").open()))
        assert len(rows) == len(source) * (len(source[0]) - 1)
        first = {r["metric"]: r["value"] for r in rows if r["step"] == "0"}
        assert first == {k: v for k, v in source[0].items() if k != "step"}
        metrics = {r["metric"] for r in long_rows(scores)}
        assert {"probe.last_layer_var", "effectiveness.usefulness.score", "probe.per_layer_var[1]"} <= metrics

    def test_union(self, two_runs, tmp_path):
        timeline, _ = merge_reports(list(two_runs), tmp_path)
        assert {r["run"] for r in long_rows(timeline)} == {"smoke", "other"}

    def test_corruption_detected(self, two_runs, tmp_path, capsys):
        import shutil
        copy = tmp_path / "smoke"
        shutil.copytree(two_runs[0], copy)
        with (copy / "timeline.csv").open("a") as fh:
            fh.write("\n")
        with pytest.raises(IntegrityError, match="timeline.csv"):
            merge_reports([copy], tmp_path / "out")
        assert main(["report", str(copy), "--out", str(tmp_path / "out")]) == 3
        assert "timeline.csv" in capsys.readouterr().err
