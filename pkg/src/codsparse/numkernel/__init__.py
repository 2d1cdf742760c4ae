"""Deterministic dense float64 arithmetic with reverse-mode differentiation."""

from . import kernels, ops
from .gradcheck import autodiff_grad, fd_grad, finite_diff_check
from .kernels import get_backend, set_backend, use_backend
from .ops import matmul, softmax_rows
from .rng import Rng, gaussian
from .tensor import (
    ContractError,
    DegenerateError,
    DimensionError,
    DomainError,
    Graph,
    Tensor,
    as_tensor,
    backward,
)

__all__ = [
    "ContractError",
    "DegenerateError",
    "DimensionError",
    "DomainError",
    "Graph",
    "Rng",
    "Tensor",
    "as_tensor",
    "autodiff_grad",
    "backward",
    "fd_grad",
    "finite_diff_check",
    "gaussian",
    "get_backend",
    "kernels",
    "matmul",
    "ops",
    "set_backend",
    "softmax_rows",
    "use_backend",
]
