"""Built-in desk-scale experiment configs."""

from __future__ import annotations

from ..model.config import ConfigError

_TRAIN = """
train.steps = 300
train.batch_size = 8
train.seq_len = 64
train.lr_peak = 3e-3
train.warmup_steps = 30
train.lr_min_ratio = 0.1
train.grad_clip = 1.0
train.weight_decay = 0.0
train.probe_every = 50
train.seed = 0
"""

_MODEL = """
model.depth = 4
model.d_model = 128
model.n_heads = 4
model.n_kv_heads = 4
model.mlp_hidden = 256
model.max_seq_len = 256
"""

_BASE = _MODEL + _TRAIN + """
output_dir = "runs"
probes.jacobian = true
effectiveness.fit_tokens = 4096
effectiveness.eval_windows = 8
"""

PRESETS = {
    "smoke": """
name = "smoke"
model.depth = 2
model.d_model = 16
model.n_heads = 2
model.n_kv_heads = 1
model.mlp_hidden = 32
model.max_seq_len = 32
train.steps = 4
train.batch_size = 2
train.seq_len = 16
train.lr_peak = 1e-2
train.warmup_steps = 1
train.probe_every = 2
train.corpus_path = "builtin:synthetic:65536:0"
effectiveness.fit_tokens = 64
effectiveness.eval_windows = 2
""",
    "depth": (_BASE, """
name = "depth"
sweep.axis = "depth"
sweep.values = [2, 4, 8]
sweep.seeds = [0, 1, 2]
"""),
    "weight_decay": (_BASE, """
name = "weight-decay"
sweep.axis = "weight_decay"
sweep.values = [0.0, 0.1]
sweep.seeds = [0, 1, 2]
"""),
    "seq_len": (_BASE, """
name = "seq-len"
sweep.axis = "seq_len"
sweep.values = [64, 256]
sweep.seeds = [0, 1, 2]
"""),
    "gqa": (_BASE, """
name = "gqa"
model.n_heads = 16
model.n_kv_heads = 16
train.weight_decay = 0.1
sweep.axis = "gqa_groups"
sweep.values = [1, 16]
sweep.seeds = [0, 1, 2]
"""),
    "moe": (_BASE, """
name = "moe"
model.moe.n_experts = 4
model.moe.top_k = 2
sweep.axis = "moe"
sweep.values = [0, 4]
sweep.seeds = [0, 1, 2]
"""),
    # half-width MoE against the dense base, active parameters matched (721,600 vs 722,304)
    "moe_matched": (_BASE, """
name = "moe-matched"
model.d_model = 64
model.moe.n_experts = 32
model.moe.top_k = 4
model.moe.n_shared = 1
model.moe.expert_hidden = 160
sweep.axis = "moe"
sweep.values = [32]
sweep.seeds = [0, 1, 2]
"""),
    # longer context, moderate decay, grouped queries and experts at the deep baseline's width
    "stacked": (_BASE, """
name = "stacked"
model.depth = 8
model.n_kv_heads = 1
model.moe.n_experts = 4
model.moe.top_k = 2
model.moe.expert_hidden = 128
train.seq_len = 256
train.steps = 100
train.warmup_steps = 10
train.weight_decay = 0.1
"""),
    "deep_baseline": (_BASE, """
name = "deep-baseline"
model.depth = 8
"""),
    "theory": """
name = "theory"
output_dir = "runs"
theory.residual.d = [64]
theory.residual.depth = [8, 32]
theory.residual.alpha = [0.25, 1.0, 4.0]
theory.residual.p = [0.1, 0.5, 1.0]
theory.transformer.d = [32]
theory.transformer.depth = [8]
theory.transformer.heads = [4]
theory.transformer.p = [0.0, 0.5, 1.0]
theory.decay.eta = [0.1]
theory.decay.lam = [0.0, 0.01, 0.1, 1.0]
theory.sequence.seq_lens = [1, 4, 16, 64, 256]
theory.gqa.groups = [1, 4, 16]
theory.gqa.n = [64]
theory.moe.ks = [1, 2, 4, 8]
""",
}


def preset_names() -> list[str]:
    return sorted(PRESETS)


def preset_layers(name: str) -> tuple[str, ...]:
    """Config text layers of a preset; later layers override earlier keys."""
    if name not in PRESETS:
        raise ConfigError("--preset", f"unknown preset {name!r}; choose from {preset_names()}")
    layers = PRESETS[name]
    return (layers,) if isinstance(layers, str) else layers


def preset_text(name: str) -> str:
    """The preset as one flat config text."""
    from .config import flatten_raw, preset_raw

    return flatten_raw(preset_raw(name))
