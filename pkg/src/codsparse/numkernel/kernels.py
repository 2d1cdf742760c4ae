"""Dense matmul kernels with a fixed accumulation order.

Every output element is accumulated as ``((0 + a0*b0) + a1*b1) + ...`` in
index order, with no fused multiply-add.  The numba kernels and the pure
numpy fallback follow exactly that order, so the two backends agree
bitwise.  BLAS is deliberately not used: it reassociates and contracts
into FMA, which breaks exact agreement with a naive triple loop.

The backend is chosen at import time from ``CODSPARSE_KERNELS``
(``numba`` or ``numpy``; default ``numba`` when importable) and can be
switched at runtime with :func:`use_backend`.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "CODSPARSE_KERNELS"
BACKENDS = ("numba", "numpy")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _matmul_np(a, b):
    m, k = a.shape
    out = np.zeros((m, b.shape[1]))
    for p in range(k):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def _bmm_np(a, b):
    nb, m, k = a.shape
    out = np.zeros((nb, m, b.shape[2]))
    for p in range(k):
        out += a[:, :, p : p + 1] * b[:, p : p + 1, :]
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True, nogil=True, fastmath=False)
    def _matmul_nb(a, b):
        m, k = a.shape
        n = b.shape[1]
        out = np.zeros((m, n))
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    out[i, j] += aip * b[p, j]
        return out

    @numba.njit(cache=True, nogil=True, fastmath=False)
    def _bmm_nb(a, b):
        nb, m, k = a.shape
        n = b.shape[2]
        out = np.zeros((nb, m, n))
        for z in range(nb):
            for i in range(m):
                for p in range(k):
                    aip = a[z, i, p]
                    for j in range(n):
                        out[z, i, j] += aip * b[z, p, j]
        return out

else:  # pragma: no cover
    _matmul_nb = _matmul_np
    _bmm_nb = _bmm_np


_IMPLS = {
    "numpy": (_matmul_np, _bmm_np),
    "numba": (_matmul_nb, _bmm_nb),
}


def _initial_backend() -> str:
    name = os.environ.get(ENV_FLAG, "").strip().lower()
    if not name:
        return "numba" if HAVE_NUMBA else "numpy"
    if name not in BACKENDS:
        raise ValueError(f"{ENV_FLAG}={name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        raise ImportError(f"{ENV_FLAG}=numba but numba is not importable")
    return name


_backend = _initial_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch the kernel backend."""
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul2d(a, b):
    """(m, k) @ (k, n) with index-ordered accumulation."""
    a = _f64(a)
    b = _f64(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul2d shape mismatch {a.shape} @ {b.shape}")
    return _IMPLS[_backend][0](a, b)


def bmm(a, b):
    """(z, m, k) @ (z, k, n), batch by batch."""
    a = _f64(a)
    b = _f64(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shape mismatch {a.shape} @ {b.shape}")
    return _IMPLS[_backend][1](a, b)


def matmul(a, b):
    """Matrix product for ``(..., m, k) @ (k, n)`` or ``(..., m, k) @ (..., k, n)``.

    Leading dimensions of a batched right operand must equal those of ``a``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if b.ndim == 2:
        lead = a.shape[:-1]
        out = matmul2d(a.reshape(-1, a.shape[-1]), b)
        return out.reshape(*lead, b.shape[1])
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"batched matmul leading dims differ: {a.shape} vs {b.shape}")
    lead = a.shape[:-2]
    out = bmm(a.reshape(-1, *a.shape[-2:]), b.reshape(-1, *b.shape[-2:]))
    return out.reshape(*lead, a.shape[-2], b.shape[-1])


def swap_last(x):
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))
