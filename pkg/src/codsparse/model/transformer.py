"""Pre-norm decoder-only transformer with rotary attention, grouped K/V heads,
SwiGLU feed-forward blocks and optional top-k expert routing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numkernel import Graph, Rng, Tensor, backward, ops
from ..numkernel.tensor import ContractError, DimensionError
from .config import ModelConfig, param_shapes


class InputError(ValueError):
    """Token ids or sequence length are incompatible with the model."""


class Model:
    """Config plus a name -> Tensor parameter mapping.

    Parameters are immutable tensors, so models produced by :func:`swap_layers`
    or the optimizer may share untouched arrays with their source.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ContractError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ContractError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def n_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def with_params(self, params: dict[str, Tensor]) -> "Model":
        return Model(self.config, params)

    def layer_names(self, layer: int) -> list[str]:
        prefix = f"layers.{layer}."
        return [n for n in self.params if n.startswith(prefix)]

    def frozen(self) -> "Model":
        """Same arrays, no gradient tracking on any parameter."""
        return Model(self.config, {n: Tensor(t.data, copy=False) for n, t in self.params.items()})

    def trainable(self) -> "Model":
        return Model(self.config, {n: Tensor(t.data, requires_grad=True, name=n, copy=False)
                                   for n, t in self.params.items()})


def params_equal(a: Model, b: Model) -> bool:
    """Bitwise equality of configs and every parameter."""
    if a.config != b.config or a.params.keys() != b.params.keys():
        return False
    return all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def build_model(config: ModelConfig, rng: Rng) -> Model:
    """Gaussian(0, init_std) weights, unit norm gains; each tensor has its own substream."""
    config.validate()
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_norm"):
            data = np.ones(shape)
        else:
            data = rng.child("param", name).normal(shape, 0.0, config.init_std)
        params[name] = Tensor(data, requires_grad=True, name=name, copy=False)
    return Model(config, params)


# ---------------------------------------------------------------------------
# trace records
# ---------------------------------------------------------------------------

@dataclass
class Capture:
    """What to keep from a forward pass."""

    attention: bool = False
    hidden: bool = True


@dataclass
class LayerRecord:
    x_in: np.ndarray  # (B, T, d) residual input
    x_mid: np.ndarray  # after the attention sublayer
    x_out: np.ndarray  # block output
    attn_out: np.ndarray | None = None
    ffn_out: np.ndarray | None = None
    attn_map: np.ndarray | None = None  # (B, H, T, T)
    expert_ids: np.ndarray | None = None  # (B*T, k)
    expert_gates: np.ndarray | None = None  # (B*T, k)
    skipped: bool = False


@dataclass
class ForwardTrace:
    layers: list[LayerRecord] = field(default_factory=list)
    final_hidden: np.ndarray | None = None

    @property
    def hidden_states(self) -> list[np.ndarray]:
        """x_0 .. x_L (L + 1 arrays)."""
        if not self.layers:
            return [self.final_hidden] if self.final_hidden is not None else []
        return [r.x_in for r in self.layers] + [self.layers[-1].x_out]


@dataclass
class _BlockOut:
    y: Tensor
    mid: Tensor
    attn_out: Tensor
    ffn_out: Tensor
    attn_map: np.ndarray | None
    expert_ids: np.ndarray | None
    expert_gates: np.ndarray | None
    lb: Tensor | None
    z: Tensor | None


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _norm(cfg: ModelConfig, x: Tensor, gain: Tensor) -> Tensor:
    return ops.rmsnorm(x, gain, cfg.norm_eps) if cfg.use_norm else x


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, width = x.shape
    return ops.transpose(ops.reshape(x, (b, t, n_heads, width // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _swiglu(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor) -> Tensor:
    return ops.matmul(ops.mul(ops.silu(ops.matmul(x, w1)), ops.matmul(x, w3)), w2)


def _project(cfg: ModelConfig, params: dict, layer: int, x: Tensor, positions):
    p = f"layers.{layer}."
    h = _norm(cfg, x, params[p + "attn_norm"])
    cos, sin = ops.rope_tables(positions, cfg.head_dim, cfg.rope_base)
    q = ops.rope(_split_heads(ops.matmul(h, params[p + "wq"]), cfg.n_heads), cos, sin)
    k = ops.rope(_split_heads(ops.matmul(h, params[p + "wk"]), cfg.n_kv_heads), cos, sin)
    v = _split_heads(ops.matmul(h, params[p + "wv"]), cfg.n_kv_heads)
    return q, k, v


def kv_heads(cfg: ModelConfig, params: dict, layer: int, x: Tensor, positions) -> tuple[Tensor, Tensor]:
    """Rotated keys and values of layer ``layer`` for residual input ``x`` (B, T, d)."""
    _, k, v = _project(cfg, params, layer, x, positions)
    return k, v


def _attention(cfg, params, layer, x, positions, prefix_kv, keep_map):
    p = f"layers.{layer}."
    q, k, v = _project(cfg, params, layer, x, positions)
    if prefix_kv is not None:
        k = ops.concat([prefix_kv[0], k], axis=2)
        v = ops.concat([prefix_kv[1], v], axis=2)
    k = ops.repeat_heads(k, cfg.group_size, axis=1)
    v = ops.repeat_heads(v, cfg.group_size, axis=1)
    scores = ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(cfg.head_dim))
    probs = ops.softmax_rows(scores, ops.causal_mask(q.shape[2], k.shape[2]))
    out = ops.matmul(_merge_heads(ops.matmul(probs, v)), params[p + "wo"])
    return out, (probs.data if keep_map else None)


def _dense_ffn(params, p, x):
    return _swiglu(x, params[p + "w1"], params[p + "w3"], params[p + "w2"])


def route(logits: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the ``top_k`` largest router logits per row, ties to the lower id."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return np.ascontiguousarray(order[:, :top_k])


def _moe_ffn(cfg: ModelConfig, params, p, x: Tensor):
    moe = cfg.moe
    b, t, d = x.shape
    n = b * t
    flat = ops.reshape(x, (n, d))
    logits = ops.matmul(flat, params[p + "router"])
    probs = ops.softmax_rows(logits)
    ids = route(logits.data, moe.top_k)
    picked = ops.take_along_last(probs, ids)
    gates = ops.div(picked, ops.sum(picked, axis=-1, keepdims=True))

    total = None
    for e in range(moe.n_experts):
        tok, slot = np.nonzero(ids == e)
        if tok.size == 0:
            continue
        q = f"{p}experts.{e}."
        out = _swiglu(ops.take_rows(flat, tok), params[q + "w1"], params[q + "w3"], params[q + "w2"])
        gate = ops.reshape(ops.take_along_last(ops.take_rows(gates, tok), slot[:, None]), (tok.size, 1))
        part = ops.index_add_rows(n, tok, ops.mul(out, gate))
        total = part if total is None else ops.add(total, part)
    for s in range(moe.n_shared):
        q = f"{p}shared.{s}."
        out = _swiglu(flat, params[q + "w1"], params[q + "w3"], params[q + "w2"])
        total = out if total is None else ops.add(total, out)

    counts = np.bincount(ids.reshape(-1), minlength=moe.n_experts).astype(np.float64)
    freq = counts / (n * moe.top_k)
    mean_prob = ops.mean(probs, axis=0)
    lb = ops.scale(ops.sum(ops.mul(mean_prob, freq)), float(moe.n_experts))
    z = ops.mean(ops.square(ops.logsumexp_rows(logits)))
    gate_vals = gates.data
    return ops.reshape(total, (b, t, d)), ids, gate_vals, lb, z


def block_forward(cfg: ModelConfig, params: dict, layer: int, x: Tensor, positions,
                  prefix_kv=None, keep_map: bool = False) -> _BlockOut:
    """One decoder block: attention sublayer, then feed-forward sublayer."""
    p = f"layers.{layer}."
    attn_out, amap = _attention(cfg, params, layer, x, positions, prefix_kv, keep_map)
    mid = ops.add(x, attn_out)
    h = _norm(cfg, mid, params[p + "ffn_norm"])
    ids = gates = lb = z = None
    if cfg.moe is None:
        ffn_out = _dense_ffn(params, p, h)
    else:
        ffn_out, ids, gates, lb, z = _moe_ffn(cfg, params, p, h)
    y = ops.add(mid, ffn_out)
    return _BlockOut(y, mid, attn_out, ffn_out, amap, ids, gates, lb, z)


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise InputError(f"tokens must be a non-empty (batch, length) array, got shape {np.shape(tokens)}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {arr.dtype}")
    if arr.min() < 0 or arr.max() >= cfg.vocab_size:
        raise InputError(f"token id outside [0, {cfg.vocab_size})")
    if arr.shape[1] > cfg.max_seq_len:
        raise InputError(f"sequence length {arr.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    return arr.astype(np.int64)


@dataclass
class _RunOut:
    logits: Tensor
    trace: ForwardTrace
    lb: Tensor | None
    z: Tensor | None


def _run(model: Model, tokens, capture: Capture, skip: int | None = None,
         replace: tuple[int, Tensor, Tensor] | None = None, stop_at: int | None = None) -> _RunOut:
    cfg = model.config
    params = model.params
    toks = check_tokens(cfg, tokens)
    positions = np.arange(toks.shape[1])
    x = ops.take_rows(params["embed"], toks)
    trace = ForwardTrace()
    lbs, zs = [], []
    for layer in range(cfg.depth if stop_at is None else stop_at):
        rec = None
        if layer == skip:
            y = x
            rec = LayerRecord(x.data, x.data, x.data, skipped=True)
        elif replace is not None and layer == replace[0]:
            _, mat, bias = replace
            y = ops.add(ops.matmul(x, ops.swap_last(mat)), bias)
            rec = LayerRecord(x.data, x.data, y.data, skipped=True)
        else:
            out = block_forward(cfg, params, layer, x, positions, keep_map=capture.attention)
            y = out.y
            if out.lb is not None:
                lbs.append(out.lb)
                zs.append(out.z)
            if capture.hidden or capture.attention:
                rec = LayerRecord(x.data, out.mid.data, y.data, out.attn_out.data, out.ffn_out.data,
                                  out.attn_map, out.expert_ids, out.expert_gates)
        if rec is not None and (capture.hidden or capture.attention):
            trace.layers.append(rec)
        x = y
    if stop_at is not None:
        trace.final_hidden = x.data
        return _RunOut(x, trace, None, None)
    trace.final_hidden = x.data
    h = _norm(cfg, x, params["final_norm"])
    logits = ops.matmul(h, params["unembed"])
    lb = z = None
    if lbs:
        lb = ops.scale(_sum_list(lbs), 1.0 / len(lbs))
        z = ops.scale(_sum_list(zs), 1.0 / len(zs))
    return _RunOut(logits, trace, lb, z)


def _sum_list(items):
    total = items[0]
    for t in items[1:]:
        total = ops.add(total, t)
    return total


def forward(model: Model, tokens, capture: Capture | None = None) -> tuple[Tensor, ForwardTrace]:
    """Logits ``(B, T, vocab)`` and the per-layer trace."""
    out = _run(model, tokens, capture or Capture())
    return out.logits, out.trace


@dataclass
class LossParts:
    total: Tensor
    cross_entropy: float
    load_balance: float
    router_z: float


def _split_windows(cfg: ModelConfig, tokens) -> tuple[np.ndarray, np.ndarray]:
    toks = np.asarray(tokens)
    if toks.ndim == 1:
        toks = toks[None, :]
    if toks.ndim != 2 or toks.shape[1] < 2:
        raise InputError("loss needs sequences of length >= 2 (no prediction targets otherwise)")
    return toks[:, :-1], toks[:, 1:]


def _loss_from(cfg: ModelConfig, run: _RunOut, targets: np.ndarray) -> LossParts:
    logits = run.logits
    b, t, v = logits.shape
    ce = ops.cross_entropy(ops.reshape(logits, (b * t, v)), targets.reshape(-1))
    total = ce
    lb_val = z_val = 0.0
    if run.lb is not None:
        total = ops.add(total, ops.scale(run.lb, cfg.moe.lb_coeff))
        total = ops.add(total, ops.scale(run.z, cfg.moe.z_coeff))
        lb_val, z_val = run.lb.item(), run.z.item()
    return LossParts(total, ce.item(), lb_val, z_val)


def loss(model: Model, tokens) -> LossParts:
    """Next-token cross-entropy plus weighted auxiliary routing terms.

    ``tokens`` holds windows of length n + 1: the first n are inputs, the
    last n are targets.
    """
    inputs, targets = _split_windows(model.config, tokens)
    run = _run(model, inputs, Capture(hidden=False))
    return _loss_from(model.config, run, targets)


def loss_and_trace(model: Model, tokens, capture: Capture | None = None) -> tuple[LossParts, ForwardTrace]:
    inputs, targets = _split_windows(model.config, tokens)
    run = _run(model, inputs, capture or Capture())
    return _loss_from(model.config, run, targets), run.trace


# ---------------------------------------------------------------------------
# interventions
# ---------------------------------------------------------------------------

def _check_layer(cfg: ModelConfig, layer: int, what: str = "layer") -> None:
    if not 0 <= layer < cfg.depth:
        raise IndexError(f"{what} index {layer} outside [0, {cfg.depth})")


def swap_layers(model: Model, first: int, second: int) -> Model:
    """New model with the full parameter sets of two blocks exchanged."""
    cfg = model.config
    _check_layer(cfg, first)
    _check_layer(cfg, second)
    params = dict(model.params)
    if first != second:
        a, b = f"layers.{first}.", f"layers.{second}."
        for name in model.layer_names(first):
            other = b + name[len(a):]
            params[name], params[other] = model.params[other], model.params[name]
    return model.with_params(params)


def skip_layer_forward(model: Model, tokens, skip: int, capture: Capture | None = None) -> ForwardTrace:
    """Trace with block ``skip`` bypassed (its output equals its input)."""
    _check_layer(model.config, skip)
    return _run(model, tokens, capture or Capture(), skip=skip).trace


def replace_layer_linear_forward(model: Model, tokens, layer: int, matrix, bias, part: str = "total") -> float:
    """Loss with block ``layer`` replaced by the per-token affine map ``x -> A x + b``.

    ``part`` selects ``total`` or ``cross_entropy``.
    """
    cfg = model.config
    _check_layer(cfg, layer)
    mat = Tensor(matrix)
    vec = Tensor(bias)
    d = cfg.d_model
    if mat.shape != (d, d) or vec.shape != (d,):
        raise DimensionError(f"affine replacement needs A {(d, d)} and b {(d,)}, got {mat.shape} and {vec.shape}")
    inputs, targets = _split_windows(cfg, tokens)
    run = _run(model, inputs, Capture(hidden=False), replace=(layer, mat, vec))
    parts = _loss_from(cfg, run, targets)
    if part == "total":
        return parts.total.item()
    if part == "cross_entropy":
        return parts.cross_entropy
    raise ValueError(f"unknown loss part {part!r}")


def hidden_at(model: Model, tokens, layer: int) -> np.ndarray:
    """Residual-stream input of ``layer`` (layer == depth gives the final hidden state)."""
    if not 0 <= layer <= model.config.depth:
        raise IndexError(f"layer index {layer} outside [0, {model.config.depth}]")
    return _run(model, tokens, Capture(hidden=False), stop_at=layer).trace.final_hidden


def block_jacobian(model: Model, tokens, layer: int, position: int | None = None) -> np.ndarray:
    """Jacobian ``J[i, j] = d y_i / d x_j`` of block ``layer`` at one token.

    Other tokens' inputs to the block are held fixed: their keys and values
    enter as constants.  The d output rows come from one reverse sweep over a
    batch of d identical copies of the token, each copy seeding one row.
    """
    cfg = model.config
    _check_layer(cfg, layer)
    toks = check_tokens(cfg, tokens)
    if toks.shape[0] != 1:
        raise InputError("block_jacobian takes a single sequence")
    n = toks.shape[1]
    pos = n - 1 if position is None else position
    if not 0 <= pos < n:
        raise IndexError(f"position {pos} outside [0, {n})")
    frozen = model.frozen()
    params = frozen.params
    x = hidden_at(frozen, toks, layer)  # (1, n, d)
    d = cfg.d_model
    prefix = None
    if pos > 0:
        k, v = kv_heads(cfg, params, layer, Tensor(x[:, :pos]), np.arange(pos))
        prefix = (Tensor(np.repeat(k.data, d, axis=0)), Tensor(np.repeat(v.data, d, axis=0)))
    seeds = Tensor(np.repeat(x[:, pos:pos + 1], d, axis=0), requires_grad=True)  # (d, 1, d)
    with Graph() as graph:
        out = block_forward(cfg, params, layer, seeds, np.array([pos]), prefix_kv=prefix)
        picked = ops.sum(ops.mul(ops.reshape(out.y, (d, d)), np.eye(d)))
    grads = backward(graph, picked)
    return grads[seeds].reshape(d, d)

