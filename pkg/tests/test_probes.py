import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from conftest import random_tokens, tiny_model

from codsparse.model import Model, ModelConfig
from codsparse.numkernel import DegenerateError, DomainError, Rng, Tensor
from codsparse.probes import (attention_entropy, attention_sparsity, hidden_variance, jacobian_deviation, kurtosis,
                              probe_model, row_entropy, weight_sparsity, write_attention_csv)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def stochastic_rows(seed: int, t: int) -> np.ndarray:
    """Random causal attention map: row i is a probability vector on 0..i."""
    raw = Rng(seed, "rows").generator.random((t, t)) ** 3
    raw = np.tril(raw)
    return raw / raw.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# variance
# ---------------------------------------------------------------------------

class TestHiddenVariance:
    def test_examples(self):
        assert hidden_variance(np.full((3, 5), 2.5)) == 0.0
        assert hidden_variance(np.array([[0.0, 2.0], [1.0, 3.0]])) == 1.0

    def test_two_pass_oracle(self):
        h = Rng(0).normal((16, 64), 1.5, 2.0)
        total = 0.0
        for row in h:
            mean = sum(row) / len(row)
            total += sum((v - mean) ** 2 for v in row) / len(row)
        assert abs(hidden_variance(h) - total / 16) < 1e-12

    def test_batched_is_token_average(self):
        h = Rng(1).normal((3, 5, 8))
        assert abs(hidden_variance(h) - hidden_variance(h.reshape(15, 8))) < 1e-15

    def test_degenerate(self):
        with pytest.raises(DegenerateError):
            hidden_variance(np.ones((4, 1)))

    @given(arrays(np.float64, (4, 6), elements=finite), st.integers(0, 2**31), arrays(np.float64, (4, 1), elements=finite))
    def test_invariances(self, h, seed, shift):
        perm = np.random.default_rng(seed).permuted(h, axis=1)
        base = hidden_variance(h)
        scale = max(1.0, float(np.max(np.abs(h))) ** 2, float(np.max(np.abs(shift))) ** 2)
        assert base >= 0
        assert abs(hidden_variance(perm) - base) <= 1e-12 * scale
        assert abs(hidden_variance(h + shift) - base) <= 1e-12 * scale


# ---------------------------------------------------------------------------
# weight sparsity
# ---------------------------------------------------------------------------

class TestWeightSparsity:
    def test_examples(self):
        assert weight_sparsity({"a": np.zeros((3, 3))}, 1e-4) == 1.0
        assert weight_sparsity({"a": np.array([0.5, 0.005, 0.0005])}, 1e-2) == 2 / 3

    def test_strict_inequality(self):
        assert weight_sparsity([np.array([0.01, -0.01])], 0.01) == 0.0

    def test_covers_every_parameter(self, model):
        zeros = {n: Tensor(np.zeros(t.shape)) for n, t in model.params.items()}
        zeros["embed"] = model["embed"]
        expected = 1.0 - np.count_nonzero(np.abs(model["embed"].data) >= 0.1) / model.n_params()
        assert weight_sparsity(model.with_params(zeros), 0.1) == expected

    def test_rejects_bad_threshold(self):
        with pytest.raises(DomainError):
            weight_sparsity([np.ones(2)], 0.0)

    @given(arrays(np.float64, 20, elements=finite), st.floats(1e-6, 10), st.floats(1e-6, 10))
    def test_monotone(self, w, e1, e2):
        lo, hi = sorted((e1, e2))
        assert 0 <= weight_sparsity([w], lo) <= weight_sparsity([w], hi) <= 1
        assert weight_sparsity([w], float(np.max(np.abs(w))) + 1.0) == 1.0


# ---------------------------------------------------------------------------
# attention sparsity
# ---------------------------------------------------------------------------

class TestAttentionSparsity:
    def test_identity_literal(self):
        assert attention_sparsity(np.eye(4), 1e-6, "literal").global_mean == 0.75

    def test_uniform_causal_support_is_dense(self):
        t = 8
        uniform = np.tril(np.ones((t, t))) / np.arange(1, t + 1)[:, None]
        assert attention_sparsity(uniform, 0.5 / t, "causal_support").global_mean == 0.0

    def test_per_head_layout(self):
        maps = [np.stack([np.eye(4), np.tril(np.ones((4, 4))) / np.arange(1, 5)[:, None]])[None]] * 2
        result = attention_sparsity(maps, 1e-6)
        assert result.per_head == [[0.75, 6 / 16]] * 2
        assert result.global_mean == (0.75 + 6 / 16) / 2

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            attention_sparsity(np.eye(3), 0.1, "rows")

    @given(st.integers(0, 10_000), st.integers(1, 12), st.floats(1e-8, 1.0), st.floats(1e-8, 1.0))
    def test_properties(self, seed, t, e1, e2):
        a = stochastic_rows(seed, t)
        lo, hi = sorted((e1, e2))
        for mode in ("literal", "causal_support"):
            low, high = attention_sparsity(a, lo, mode), attention_sparsity(a, hi, mode)
            assert 0 <= low.global_mean <= high.global_mean <= 1
        lit = attention_sparsity(a, lo, "literal").counts[0][0]
        sup = attention_sparsity(a, lo, "causal_support").counts[0][0]
        assert lit == sup + t * (t - 1) // 2


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------

class TestEntropy:
    def test_one_hot_and_uniform(self):
        assert np.all(row_entropy(np.eye(5)) == 0.0)
        t = 6
        uniform = np.tril(np.ones((t, t))) / np.arange(1, t + 1)[:, None]
        assert np.allclose(row_entropy(uniform), np.log(np.arange(1, t + 1)), rtol=0, atol=1e-10)

    def test_high_precision_oracle(self):
        a = stochastic_rows(3, 10)
        mpmath.mp.dps = 40
        for row, value in zip(a, row_entropy(a)):
            exact = -mpmath.fsum(mpmath.mpf(p) * mpmath.log(mpmath.mpf(p)) for p in row if p > 0)
            assert abs(value - float(exact)) < 1e-10

    def test_aggregation(self):
        maps = np.stack([np.eye(3), np.tril(np.ones((3, 3))) / np.arange(1, 4)[:, None]])[None]
        ent = attention_entropy([maps])
        expected_head = (0.0 + math.log(2) + math.log(3)) / 3
        assert ent.per_head[0][0] == 0.0
        assert abs(ent.per_head[0][1] - expected_head) < 1e-15
        assert abs(ent.global_mean - expected_head / 2) < 1e-15

    @given(st.integers(0, 10_000), st.integers(1, 12))
    def test_bounds(self, seed, t):
        ent = row_entropy(stochastic_rows(seed, t))
        support = np.log(np.arange(1, t + 1))
        assert np.all(ent >= -1e-15) and np.all(ent <= support + 1e-12)


# ---------------------------------------------------------------------------
# kurtosis
# ---------------------------------------------------------------------------

class TestKurtosis:
    def test_rademacher(self):
        h = np.tile(np.array([[1.0], [-1.0]]), (50, 3))
        k = kurtosis(h)
        assert np.allclose(k.per_dim, 1.0, rtol=0, atol=1e-9) and abs(k.layer - 1.0) < 1e-9

    def test_constant_dimension_flagged(self):
        h = np.column_stack([np.tile([1.0, -1.0], 10), np.full(20, 4.0)])
        k = kurtosis(h)
        assert k.degenerate == [1] and np.isnan(k.per_dim[1]) and k.layer == 1.0

    def test_all_degenerate(self):
        with pytest.raises(DegenerateError):
            kurtosis(np.ones((5, 3)))
        with pytest.raises(DegenerateError):
            kurtosis(np.ones((1, 3)))

    def test_gaussian(self):
        k = kurtosis(Rng(0).normal((100_000, 8)))
        assert abs(k.layer - 3.0) < 0.1

    @given(arrays(np.float64, (12, 3), elements=st.floats(-100, 100)))
    def test_lower_bound(self, h):
        try:
            k = kurtosis(h)
        except DegenerateError:
            return
        ok = ~np.isnan(k.per_dim)
        assert np.all(k.per_dim[ok] >= 1.0 - 1e-9)


# ---------------------------------------------------------------------------
# Jacobian deviation
# ---------------------------------------------------------------------------

def _zero_branches(model: Model) -> Model:
    params = {n: (Tensor(np.zeros(t.shape)) if n.endswith((".wo", ".w2")) else t) for n, t in model.params.items()}
    return model.with_params(params)


class TestJacobianDeviation:
    def test_zero_blocks(self):
        model = _zero_branches(tiny_model())
        toks = random_tokens(0, 3, 6)
        assert [jacobian_deviation(model, toks, layer) for layer in range(2)] == [0.0, 0.0]

    def test_linear_block(self):
        model = tiny_model(use_norm=False, n_kv_heads=4)
        params = dict(model.params)
        params["layers.0.w2"] = Tensor(np.zeros((24, 16)))
        model = model.with_params(params)
        a = model["layers.0.wv"].data @ model["layers.0.wo"].data
        dev = jacobian_deviation(model, random_tokens(1, 2, 5), 0, position=0)
        assert abs(dev - np.linalg.norm(a)) < 1e-12


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

class TestReport:
    def test_fields_and_ranges(self, moe_model, tmp_path):
        toks = random_tokens(2, 3, 10)
        report, trace = probe_model(moe_model, toks, jacobian=True)
        depth = moe_model.config.depth
        assert len(report.per_layer_var) == len(report.attn_block_var) == len(report.mlp_block_var) == depth
        assert report.last_layer_var == report.per_layer_var[-1] >= 0
        assert set(report.weight_sparsity) == {"0.1", "0.01", "0.0001"}
        assert set(report.attn_sparsity) == {"0.001", "0.0001", "1e-06"}
        for entry in report.attn_sparsity.values():
            for mode in ("literal", "causal_support"):
                assert all(0 <= f <= 1 for head in entry[mode]["per_head"] for f in head)
        assert report.attn_entropy["global"] >= 0
        assert len(report.kurtosis["per_dim"]) == depth and len(report.kurtosis["per_dim"][0]) == 16
        assert len(report.jacobian_dev) == depth
        data = json.loads(report.to_json(tmp_path / "r.json"))
        assert data == json.loads((tmp_path / "r.json").read_text())
        assert data["meta"] == {"batch": 3, "seq_len": 10}

    def test_attention_off(self, model):
        report, _ = probe_model(model, random_tokens(3, 2, 6), attention=False)
        assert report.attn_sparsity == {} and report.jacobian_dev is None

    def test_attention_csv(self, tmp_path):
        path = write_attention_csv(stochastic_rows(0, 5), tmp_path / "a.csv")
        back = np.loadtxt(path, delimiter=",")
        assert np.array_equal(back, stochastic_rows(0, 5))
        with pytest.raises(ValueError):
            write_attention_csv(np.ones((2, 2, 2)), tmp_path / "b.csv")
