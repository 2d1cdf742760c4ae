"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import ContractError, Graph, Tensor, backward


def autodiff_grad(f: Callable[[Tensor], Tensor], theta) -> np.ndarray:
    """Gradient of scalar ``f`` at ``theta`` by one reverse sweep."""
    leaf = Tensor(theta, requires_grad=True)
    with Graph() as graph:
        loss = f(leaf)
    grads = backward(graph, loss)
    return grads.get(leaf, np.zeros(leaf.shape))


def fd_grad(f: Callable[[Tensor], Tensor], theta, step: float = 1e-6,
            coords=None) -> np.ndarray:
    """Central differences with per-coordinate step ``step * max(1, |theta_i|)``.

    Only the flat indices in ``coords`` are evaluated (all by default); the
    rest of the returned array is NaN.
    """
    base = np.array(theta, dtype=np.float64)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else np.asarray(coords).reshape(-1)
    out = np.full(flat.size, np.nan)
    for i in idx:
        h = step * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(base)).item()
        flat[i] = orig - h
        down = f(Tensor(base)).item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(base.shape)


def relative_errors(auto: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(auto - numeric) / np.maximum(1e-12, np.abs(numeric))


def finite_diff_check(f: Callable[[Tensor], Tensor], theta, step: float = 1e-6,
                      coords=None) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` maps a tensor to a single-element tensor.  A non-finite value
    anywhere yields ``inf`` so the check fails rather than passing vacuously.
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    auto = autodiff_grad(f, theta)
    numeric = fd_grad(f, theta, step, coords)
    if coords is not None:
        sel = np.asarray(coords).reshape(-1)
        auto, numeric = auto.reshape(-1)[sel], numeric.reshape(-1)[sel]
    if not (np.all(np.isfinite(auto)) and np.all(np.isfinite(numeric))):
        return float("inf")
    if auto.size == 0:
        return 0.0
    return float(relative_errors(auto, numeric).max())
