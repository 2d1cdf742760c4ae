"""Decoder-only transformer with full per-layer traces and layer interventions."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PAD_ID, ConfigError, ModelConfig, MoEConfig, active_param_count, matmul_flops_per_token, param_shapes
from .transformer import (
    Capture,
    ForwardTrace,
    InputError,
    LayerRecord,
    LossParts,
    Model,
    block_jacobian,
    build_model,
    forward,
    hidden_at,
    loss,
    loss_and_trace,
    params_equal,
    replace_layer_linear_forward,
    route,
    skip_layer_forward,
    swap_layers,
)

__all__ = [
    "PAD_ID",
    "active_param_count",
    "matmul_flops_per_token",
    "Capture",
    "CheckpointError",
    "ConfigError",
    "ForwardTrace",
    "InputError",
    "LayerRecord",
    "LossParts",
    "Model",
    "ModelConfig",
    "MoEConfig",
    "block_jacobian",
    "build_model",
    "forward",
    "hidden_at",
    "load_checkpoint",
    "loss",
    "loss_and_trace",
    "param_shapes",
    "params_equal",
    "replace_layer_linear_forward",
    "route",
    "save_checkpoint",
    "skip_layer_forward",
    "swap_layers",
]
