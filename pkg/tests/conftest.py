import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from codsparse.model import ModelConfig, MoEConfig, build_model
from codsparse.numkernel import Rng

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tiny_config(**changes) -> ModelConfig:
    base = dict(depth=2, d_model=16, n_heads=4, n_kv_heads=2, mlp_hidden=24, vocab_size=32, max_seq_len=16,
                init_std=0.2)
    base.update(changes)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, **changes):
    return build_model(tiny_config(**changes), Rng(seed, "test-model"))


def random_tokens(seed: int, batch: int, length: int, vocab: int = 32) -> np.ndarray:
    return Rng(seed, "tokens").integers(0, vocab, (batch, length))


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def moe_model():
    return tiny_model(moe=MoEConfig(n_experts=4, top_k=2, n_shared=1))


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion
# ---------------------------------------------------------------------------

_criteria: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion id")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    key = f"{marker.args[0]:>2}. {marker.args[1]}"
    failed = call.excinfo is not None
    known = failed and item.get_closest_marker("xfail") is not None
    _criteria.setdefault(key, []).append(("PASS", "FAIL")[failed] + (f" (known: {item.name})" if known else ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: int(k.split(".")[0])):
        failures = [o for o in _criteria[key] if o != "PASS"]
        outcome = "PASS" if not failures else "FAIL"
        notes = sorted({o[5:] for o in failures if o != "FAIL"})
        terminalreporter.write_line(f"{outcome}  criterion {key}" + "".join(f"  {n}" for n in notes))
