"""Architecture records."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

BYTE_VOCAB = 256
PAD_ID = 256


class ConfigError(ValueError):
    """A configuration field holds an invalid value; ``field`` names it."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int
    top_k: int
    n_shared: int = 0
    lb_coeff: float = 0.01
    z_coeff: float = 0.001
    expert_hidden: int | None = None  # defaults to the dense mlp_hidden

    def validate(self, prefix: str = "moe") -> None:
        if self.n_experts < 1:
            raise ConfigError(f"{prefix}.n_experts", f"must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"{prefix}.top_k", f"must lie in [1, n_experts={self.n_experts}], got {self.top_k}")
        if self.n_shared < 0:
            raise ConfigError(f"{prefix}.n_shared", f"must be >= 0, got {self.n_shared}")
        if self.expert_hidden is not None and self.expert_hidden < 1:
            raise ConfigError(f"{prefix}.expert_hidden", f"must be >= 1, got {self.expert_hidden}")
        for name in ("lb_coeff", "z_coeff"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{prefix}.{name}", "must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    mlp_hidden: int
    vocab_size: int = BYTE_VOCAB + 1
    max_seq_len: int = 512
    moe: MoEConfig | None = None
    init_std: float = 0.02
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    # test-only switch: drop every RMSNorm so blocks become plain residual maps
    use_norm: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def expert_hidden(self) -> int:
        if self.moe is not None and self.moe.expert_hidden is not None:
            return self.moe.expert_hidden
        return self.mlp_hidden

    def validate(self, prefix: str = "model") -> None:
        positive = ("depth", "d_model", "n_heads", "n_kv_heads", "mlp_hidden", "vocab_size", "max_seq_len")
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{prefix}.{name}", f"must be a positive integer, got {value!r}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"{prefix}.n_kv_heads", f"{self.n_kv_heads} does not divide n_heads={self.n_heads}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"{prefix}.n_heads", f"{self.n_heads} does not divide d_model={self.d_model}")
        if self.head_dim % 2:
            raise ConfigError(f"{prefix}.n_heads", f"head dim {self.head_dim} must be even for rotary embedding")
        if not self.init_std >= 0:
            raise ConfigError(f"{prefix}.init_std", f"must be >= 0, got {self.init_std}")
        if not self.rope_base > 0:
            raise ConfigError(f"{prefix}.rope_base", f"must be > 0, got {self.rope_base}")
        if not self.norm_eps >= 0:
            raise ConfigError(f"{prefix}.norm_eps", f"must be >= 0, got {self.norm_eps}")
        if self.moe is not None:
            self.moe.validate(f"{prefix}.moe")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"model.{sorted(unknown)[0]}", "unknown field")
        moe = raw.pop("moe", None)
        if isinstance(moe, dict):
            moe_known = {f.name for f in dataclasses.fields(MoEConfig)}
            bad = set(moe) - moe_known
            if bad:
                raise ConfigError(f"model.moe.{sorted(bad)[0]}", "unknown field")
            moe = MoEConfig(**moe)
        return cls(moe=moe, **raw)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in canonical order."""
    d, dh = cfg.d_model, cfg.head_dim
    kv = cfg.n_kv_heads * dh
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for layer in range(cfg.depth):
        p = f"layers.{layer}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, kv)
        shapes[p + "wv"] = (d, kv)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        if cfg.moe is None:
            h = cfg.mlp_hidden
            shapes[p + "w1"] = (d, h)
            shapes[p + "w3"] = (d, h)
            shapes[p + "w2"] = (h, d)
        else:
            h = cfg.expert_hidden
            shapes[p + "router"] = (d, cfg.moe.n_experts)
            for kind, count in (("experts", cfg.moe.n_experts), ("shared", cfg.moe.n_shared)):
                for e in range(count):
                    q = f"{p}{kind}.{e}."
                    shapes[q + "w1"] = (d, h)
                    shapes[q + "w3"] = (d, h)
                    shapes[q + "w2"] = (h, d)
    shapes["final_norm"] = (d,)
    shapes["unembed"] = (d, cfg.vocab_size)
    return shapes


def active_param_count(cfg: ModelConfig) -> int:
    """Parameters touched per token: everything except the ``E - k`` unselected routed experts."""
    total = sum(math.prod(shape) for shape in param_shapes(cfg).values())
    if cfg.moe is None:
        return total
    idle = cfg.moe.n_experts - cfg.moe.top_k
    return total - cfg.depth * idle * 3 * cfg.d_model * cfg.expert_hidden


def matmul_flops_per_token(cfg: ModelConfig, seq_len: int) -> float:
    """Forward FLOPs per token, a multiply-add counting 2: projections, active experts, router,
    unembedding, and the causal score and value products over an average context of ``(T + 1) / 2``."""
    d, kv = cfg.d_model, cfg.n_kv_heads * cfg.head_dim
    per_layer = 2 * d * d + 2 * d * kv
    if cfg.moe is None:
        per_layer += 3 * d * cfg.mlp_hidden
    else:
        per_layer += 3 * d * cfg.expert_hidden * (cfg.moe.top_k + cfg.moe.n_shared) + d * cfg.moe.n_experts
    weights = cfg.depth * per_layer + d * cfg.vocab_size
    attention = cfg.depth * 2 * d * (seq_len + 1)
    return 2.0 * weights + attention


def is_norm_gain(name: str) -> bool:
    return name.endswith("_norm")

