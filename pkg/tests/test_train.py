import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from codsparse.model import ConfigError, ModelConfig, load_checkpoint, params_equal
from codsparse.numkernel import Rng
from codsparse.train import (CorpusError, OptimizerError, OptimizerState, TrainConfig, adamw_step, load_corpus,
                             lr_at, make_splits, make_windows, read_timeline, synthetic_text, timeline_columns,
                             train_run)

SMALL_CORPUS = "builtin:synthetic:60000:7"


def small_model(**changes) -> ModelConfig:
    base = dict(depth=2, d_model=32, n_heads=4, n_kv_heads=4, mlp_hidden=64, max_seq_len=32)
    base.update(changes)
    return ModelConfig(**base)


def small_train(**changes) -> TrainConfig:
    base = dict(steps=6, batch_size=4, seq_len=16, lr_peak=3e-3, warmup_steps=2, probe_every=3,
                corpus_path=SMALL_CORPUS)
    base.update(changes)
    return TrainConfig(**base)


def random_params(seed: int) -> dict:
    rng = Rng(seed, "params")
    return {"w": rng.normal((3, 4)), "layers.0.attn_norm": 1.0 + rng.normal((4,), 0, 0.1), "b": rng.normal((5,))}


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

def scalar_adamw(w, g, lr, lam, b1=0.9, b2=0.95, eps=1e-8, decay=True):
    """First step from zero moments, one scalar at a time."""
    if decay:
        w = w * (1.0 - lr * lam)
    m = (1.0 - b1) * g
    v = (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1)
    v_hat = v / (1.0 - b2)
    return w - lr * m_hat / (math.sqrt(v_hat) + eps)


class TestAdamW:
    def test_zero_grads_no_decay_is_identity(self):
        params = random_params(0)
        grads = {n: np.zeros_like(p) for n, p in params.items()}
        new, state, _ = adamw_step(params, grads, OptimizerState.zeros_like(params), 1e-2, 0.0)
        for n in params:
            assert np.array_equal(new[n], params[n])
        assert state.t == 1

    def test_zero_grads_scale_by_decay_factor(self):
        params = random_params(1)
        grads = {n: np.zeros_like(p) for n, p in params.items()}
        new, _, info = adamw_step(params, grads, OptimizerState.zeros_like(params), 1e-2, 0.5)
        assert np.array_equal(new["w"], params["w"] * (1.0 - 1e-2 * 0.5))
        assert np.array_equal(new["layers.0.attn_norm"], params["layers.0.attn_norm"])
        assert "layers.0.attn_norm" not in info.decayed

    @pytest.mark.parametrize("seed", range(3))
    def test_first_step_matches_scalar_reference(self, seed):
        params = random_params(seed)
        grads = {n: Rng(seed, "grads").child(n).normal(p.shape) for n, p in params.items()}
        lr, lam = 3e-3, 0.1
        new, _, _ = adamw_step(params, grads, OptimizerState.zeros_like(params), lr, lam, grad_clip=None)
        for name, p in params.items():
            expected = np.array([scalar_adamw(w, g, lr, lam, decay=not name.endswith("_norm"))
                                 for w, g in zip(p.reshape(-1), grads[name].reshape(-1))]).reshape(p.shape)
            assert np.max(np.abs(new[name] - expected)) < 1e-12

    @given(st.lists(st.floats(1e-4, 1e-1), min_size=1, max_size=12), st.floats(0.0, 2.0))
    def test_decay_product_bitwise(self, lrs, lam):
        params = random_params(2)
        grads = {n: np.zeros_like(p) for n, p in params.items()}
        state = OptimizerState.zeros_like(params)
        current = params
        expected = params["w"]
        for lr in lrs:
            current, state, _ = adamw_step(current, grads, state, lr, lam)
            expected = expected * (1.0 - lr * lam)
        assert np.array_equal(current["w"], expected)

    def test_non_finite_gradient_rejected(self):
        params = random_params(3)
        grads = {n: np.zeros_like(p) for n, p in params.items()}
        grads["b"][2] = np.nan
        with pytest.raises(OptimizerError, match="b \\(1 entries\\)"):
            adamw_step(params, grads, OptimizerState.zeros_like(params), 1e-3, 0.0)

    def test_shape_and_lr_checks(self):
        params = random_params(4)
        grads = {n: np.zeros_like(p) for n, p in params.items()}
        with pytest.raises(ValueError):
            adamw_step(params, grads, OptimizerState.zeros_like(params), -1.0, 0.0)
        grads["w"] = np.zeros((4, 3))
        with pytest.raises(ValueError):
            adamw_step(params, grads, OptimizerState.zeros_like(params), 1e-3, 0.0)

    def test_clipping_scales_gradient(self):
        params = {"w": np.zeros(2)}
        grads = {"w": np.array([3.0, 4.0])}
        _, state, info = adamw_step(params, grads, OptimizerState.zeros_like(params), 1e-3, 0.0, grad_clip=1.0)
        assert info.grad_norm == 5.0 and info.clip_scale == 0.2
        assert np.allclose(state.m["w"], 0.1 * np.array([0.6, 0.8]), rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

class TestSchedule:
    cfg = TrainConfig(steps=100, batch_size=1, seq_len=8, lr_peak=2e-3, warmup_steps=10, lr_min_ratio=0.1)

    def test_examples(self):
        assert lr_at(0, self.cfg) == 0.0
        assert lr_at(10, self.cfg) == 2e-3
        midpoint = 2e-3 * (0.1 + 0.9 * (1.0 + math.cos(math.pi / 2)) / 2.0)
        assert abs(lr_at(55, self.cfg) - midpoint) < 1e-18
        assert abs(lr_at(100, self.cfg) - 2e-4) < 1e-18

    @given(st.integers(1, 300), st.data(), st.floats(0.0, 1.0))
    def test_monotone_after_warmup(self, steps, data, ratio):
        warmup = data.draw(st.integers(0, steps))
        cfg = TrainConfig(steps=steps, batch_size=1, seq_len=8, lr_peak=1e-3, warmup_steps=warmup,
                          lr_min_ratio=ratio)
        values = [lr_at(s, cfg) for s in range(steps + 1)]
        assert all(a >= b for a, b in zip(values[warmup:], values[warmup + 1:]))
        assert all(a <= b for a, b in zip(values[:warmup], values[1:warmup + 1]))
        assert values[warmup] == 1e-3 or (warmup == 0 and values[0] == 1e-3)

    def test_continuous_at_junction(self):
        eps_step = TrainConfig(steps=10_000, batch_size=1, seq_len=8, lr_peak=1.0, warmup_steps=5000)
        assert abs(lr_at(4999, eps_step) - lr_at(5000, eps_step)) <= 1.0 / 5000 + 1e-12
        assert abs(lr_at(5001, eps_step) - lr_at(5000, eps_step)) < 1e-6

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(101, self.cfg)


# ---------------------------------------------------------------------------
# config and corpus
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("changes,field", [
    ({"warmup_steps": 7, "steps": 6}, "train.warmup_steps"),
    ({"lr_peak": 0.0}, "train.lr_peak"),
    ({"weight_decay": -0.1}, "train.weight_decay"),
    ({"batch_size": 0}, "train.batch_size"),
    ({"lr_min_ratio": 1.5}, "train.lr_min_ratio"),
])
def test_train_config_validation(changes, field):
    with pytest.raises(ConfigError) as err:
        small_train(**changes)
    assert err.value.field == field


class TestCorpus:
    def test_synthetic_is_deterministic_ascii(self):
        a, b = synthetic_text(5000, 3), synthetic_text(5000, 3)
        assert a == b and len(a) == 5000 and a != synthetic_text(5000, 4)
        assert max(a) < 128

    def test_file_corpus(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_bytes(bytes(range(256)))
        assert load_corpus(path).tolist() == list(range(256))
        empty = tmp_path / "e.txt"
        empty.write_bytes(b"")
        with pytest.raises(CorpusError):
            load_corpus(empty)

    @given(st.integers(50, 2000), st.integers(1, 20), st.integers(0, 5))
    def test_windows_tile_and_split(self, n_tokens, seq_len, heldout):
        tokens = np.arange(n_tokens)
        try:
            win = make_windows(tokens, seq_len, heldout)
        except CorpusError:
            assert (n_tokens - 1) // seq_len < heldout + 2
            return
        for i in np.concatenate([win.train_idx, win.heldout_idx]):
            w = win.window(i)
            assert w.size == seq_len + 1 and w[0] == i * seq_len
        train_tokens = set(win.batch(win.train_idx).reshape(-1).tolist())
        held_tokens = set(win.batch(win.heldout_idx).reshape(-1).tolist()) if heldout else set()
        assert not train_tokens & held_tokens

    def test_splits_disjoint(self):
        splits = make_splits(small_train(), eval_windows=3, fit_windows=2)
        assert splits.probe.shape == (8, 17) and splits.eval.shape == (3, 17) and splits.fit.shape == (2, 17)
        starts = {tuple(w[:4]) for w in np.concatenate([splits.probe, splits.eval, splits.fit])}
        assert len(starts) == 13

    def test_corpus_too_small(self):
        with pytest.raises(CorpusError):
            train_run(small_model(), small_train(corpus_path="builtin:synthetic:200:1"))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class TestTrainRun:
    def test_zero_steps(self, tmp_path):
        result = train_run(small_model(), small_train(steps=0, warmup_steps=0), tmp_path)
        assert [row["step"] for row in result.timeline] == [0]
        assert (tmp_path / "checkpoint.zip").exists()
        assert read_timeline(tmp_path / "timeline.csv")[0]["step"] == 0

    def test_initial_loss_near_log_vocab(self):
        result = train_run(small_model(init_std=0.02), small_train(steps=0, warmup_steps=0))
        assert abs(result.timeline[0]["ce"] - math.log(257)) < 0.5

    def test_timeline_schema_and_probe_steps(self, tmp_path):
        result = train_run(small_model(), small_train(steps=7), tmp_path)
        assert [row["step"] for row in result.timeline] == [0, 3, 6, 7]
        header = (tmp_path / "timeline.csv").read_text().splitlines()[0].split(",")
        assert header == timeline_columns(2)
        assert header[:7] == ["step", "lr", "loss", "ce", "lb", "z", "last_layer_var"]
        assert header[-3:] == ["var_0", "var_1", "grad_norm"]
        rows = read_timeline(tmp_path / "timeline.csv")
        assert rows[-1]["var_1"] == rows[-1]["last_layer_var"] == result.timeline[-1]["last_layer_var"]

    def test_deterministic(self, tmp_path):
        train_run(small_model(), small_train(), tmp_path / "a")
        train_run(small_model(), small_train(), tmp_path / "b")
        for name in ("timeline.csv", "checkpoint.zip"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_checkpoint_matches_returned_model(self, tmp_path):
        result = train_run(small_model(), small_train(), tmp_path)
        assert params_equal(load_checkpoint(tmp_path / "checkpoint.zip"), result.model)

    def test_loss_decreases(self):
        result = train_run(small_model(), small_train(steps=40, warmup_steps=4, lr_peak=1e-2, probe_every=40))
        assert result.timeline[-1]["ce"] < result.timeline[0]["ce"] - 1.0

    def test_seq_len_exceeding_context(self):
        with pytest.raises(ConfigError) as err:
            train_run(small_model(max_seq_len=8), small_train())
        assert err.value.field == "train.seq_len"


@pytest.mark.slow
def test_weight_decay_lowers_last_layer_variance():
    wins = 0
    for seed in range(3):
        final = {}
        for lam in (0.0, 0.1):
            cfg = small_train(steps=200, warmup_steps=20, batch_size=8, seq_len=32, lr_peak=1e-2,
                              weight_decay=lam, probe_every=200, seed=seed, corpus_path="builtin:synthetic:400000:7")
            final[lam] = train_run(small_model(), cfg).timeline[-1]["last_layer_var"]
        wins += final[0.1] < final[0.0]
    assert wins >= 2
