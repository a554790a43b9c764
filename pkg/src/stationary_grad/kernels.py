"""Compiled inner loop for the linear sensitivity recursion ``m <- J m + G``."""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _linear_recursion_py(J, G, m0):
    L = J.shape[0]
    out = np.empty(G.shape)
    m = m0.copy()
    for t in range(L):
        m = J[t] @ m + G[t]
        out[t] = m
    return out


if numba is not None:
    @numba.njit(cache=True)
    def _linear_recursion_nb(J, G, m0):
        L, B, n, _ = J.shape
        p = G.shape[3]
        out = np.empty((L, B, n, p))
        m = m0.copy()
        for t in range(L):
            for b in range(B):
                for i in range(n):
                    for k in range(p):
                        s = G[t, b, i, k]
                        for j in range(n):
                            s += J[t, b, i, j] * m[b, j, k]
                        out[t, b, i, k] = s
                for i in range(n):
                    for k in range(p):
                        m[b, i, k] = out[t, b, i, k]
        return out
else:  # pragma: no cover
    _linear_recursion_nb = None


def linear_recursion(J, G, m0):
    """Iterate ``m_{t+1} = J[t] m_t + G[t]`` and return every ``m_{t+1}``.

    Shapes: ``J (L, B, n, n)``, ``G (L, B, n, p)``, ``m0 (B, n, p)``.
    """
    L, B = J.shape[0], J.shape[1]
    n = m0.shape[-2]
    p = m0.shape[-1]
    J = np.ascontiguousarray(np.broadcast_to(J, (L, B, n, n)), dtype=np.float64)
    G = np.ascontiguousarray(np.broadcast_to(G, (L, B, n, p)), dtype=np.float64)
    m0 = np.ascontiguousarray(m0, dtype=np.float64)
    if _linear_recursion_nb is None:
        return _linear_recursion_py(J, G, m0)
    return _linear_recursion_nb(J, G, m0)


def warm_up():
    """Trigger compilation so later timings exclude it."""
    linear_recursion(np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1)))
