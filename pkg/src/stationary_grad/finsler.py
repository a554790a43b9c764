"""Weighted (Finsler) geometry on the state and parameter spaces.

A weight ``A(x)`` turns a base norm into the position-dependent norm
``||u||_{A(x)} = ||A(x) u||``. Induced norms of linear and bilinear maps are
computed exactly for the weighted-l1 / l-infinity / l2 family by unit-ball
vertex enumeration or singular values.
"""

from __future__ import annotations

import itertools
from functools import partial
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NormUnsupportedError

MAX_LINF_ENUM = 16
MAX_BILINEAR_LINF_DIM = 12
MAX_ASSIGNMENT = 512
DEFAULT_SEGMENTS = 64

_KINDS = ("l1", "linf", "l2")


@dataclass(frozen=True)
class BaseNorm:
    """A norm on R^n: weighted l1 ``sum p_i |u_i|``, l-infinity or l2."""

    kind: str
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown norm kind {self.kind!r}; expected one of {_KINDS}")
        if self.weights is not None:
            if self.kind != "l1":
                raise ValueError("weights are only supported for the l1 norm")
            w = np.asarray(self.weights, dtype=float)
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("l1 weights must be strictly positive")
            object.__setattr__(self, "weights", w)

    @classmethod
    def l1(cls, weights=None):
        return cls("l1", weights)

    @classmethod
    def linf(cls):
        return cls("linf")

    @classmethod
    def l2(cls):
        return cls("l2")

    def _w(self, n):
        return np.ones(n) if self.weights is None else self.weights

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "l1":
            return np.abs(u) @ self._w(u.shape[-1])
        if self.kind == "linf":
            return np.abs(u).max(axis=-1) if u.shape[-1] else np.zeros(u.shape[:-1])
        return np.sqrt(np.sum(u * u, axis=-1))

    def vertices(self, n):
        """Unit-ball vertices up to sign, shape ``(k, n)`` (l1 and l-infinity only)."""
        if self.kind == "l1":
            return np.diag(1.0 / self._w(n))
        if self.kind == "linf":
            if n == 0:
                return np.zeros((1, 0))
            signs = np.array(list(itertools.product((1.0, -1.0), repeat=n - 1)))
            signs = signs.reshape(len(signs), n - 1)
            return np.hstack([np.ones((len(signs), 1)), signs])
        raise NormUnsupportedError("the l2 unit ball has no finite vertex set")

    def to_dict(self):
        return {"kind": self.kind,
                "weights": None if self.weights is None else self.weights.tolist()}


@dataclass(frozen=True)
class WeightedNorm:
    """``u -> base(W u)``; ``matrix=None`` means ``W = I``."""

    base: BaseNorm
    matrix: Optional[np.ndarray] = None

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.matrix is not None:
            u = np.einsum("...ij,...j->...i", self.matrix, u)
        return self.base(u)


def operator_norm(M, in_norm: BaseNorm, out_norm: BaseNorm):
    """Exact norm of ``M: (R^n, in_norm) -> (R^m, out_norm)``; ``M`` has shape ``(..., m, n)``."""
    M = np.asarray(M, dtype=float)
    n = M.shape[-1]
    if in_norm.kind == "l1":
        cols = out_norm(np.swapaxes(M, -1, -2))
        return (cols / in_norm._w(n)).max(axis=-1)
    if in_norm.kind == "linf":
        if out_norm.kind == "linf":
            return np.abs(M).sum(axis=-1).max(axis=-1)
        if n > MAX_LINF_ENUM:
            raise NormUnsupportedError(
                f"exact l-infinity induced norm needs 2^{n} sign vectors; limit is n <= {MAX_LINF_ENUM}")
        V = in_norm.vertices(n)
        return out_norm(np.einsum("...mn,kn->...km", M, V)).max(axis=-1)
    if out_norm.kind == "l2":
        return np.linalg.svd(M, compute_uv=False)[..., 0]
    raise NormUnsupportedError("l2 input norm is only supported with an l2 output norm")


def bilinear_norm(Q, in1: BaseNorm, in2: BaseNorm, out_norm: BaseNorm):
    """Exact norm of ``Q: R^n1 x R^n2 -> R^m`` given as ``Q[..., k, i, j]``.

    A norm is convex in each argument separately, so the supremum over the
    product of unit balls is attained at a pair of vertices.
    """
    Q = np.asarray(Q, dtype=float)
    n1, n2 = Q.shape[-2], Q.shape[-1]
    for base, dim in ((in1, n1), (in2, n2)):
        if base.kind not in ("l1", "linf"):
            raise NormUnsupportedError("bilinear norms need l1 or l-infinity input norms")
        if base.kind == "linf" and dim > MAX_BILINEAR_LINF_DIM:
            raise NormUnsupportedError(
                f"l-infinity bilinear enumeration limited to dim <= {MAX_BILINEAR_LINF_DIM}")
    V1 = in1.vertices(n1)
    V2 = in2.vertices(n2)
    # enumerate the smaller vertex set explicitly, reduce the other one
    if len(V1) > len(V2):
        Q = np.swapaxes(Q, -1, -2)
        V1, V2, in2 = V2, V1, in1
    Qu = np.swapaxes(Q, -1, -2) @ V1.T                       # [..., k, j, a]
    if in2.kind == "linf" and out_norm.kind == "linf":
        return np.abs(Qu).sum(axis=-2).max(axis=(-1, -2))
    vals = out_norm(np.moveaxis(V2 @ Qu, -3, -1))              # [..., b, a]
    return vals.max(axis=(-1, -2))


def _inv_or_none(norm: WeightedNorm):
    return None if norm.matrix is None else np.linalg.inv(norm.matrix)


def induced_operator_norm(E, in_norm: WeightedNorm, out_norm: WeightedNorm):
    """``sup ||E u||_out`` over ``||u||_in = 1`` for weighted norms (batched over leading axes)."""
    M = np.asarray(E, dtype=float)
    if out_norm.matrix is not None:
        M = out_norm.matrix @ M
    inv = _inv_or_none(in_norm)
    if inv is not None:
        M = M @ inv
    return operator_norm(M, in_norm.base, out_norm.base)


def induced_bilinear_norm(Q, in_norms, out_norm: WeightedNorm):
    """``sup ||Q[u, v]||_out`` over ``||u||_1 = ||v||_2 = 1`` for weighted norms."""
    n1, n2 = in_norms
    Q = np.asarray(Q, dtype=float)
    if out_norm.matrix is not None:
        Q = np.einsum("...pk,...kij->...pij", out_norm.matrix, Q)
    inv1, inv2 = _inv_or_none(n1), _inv_or_none(n2)
    if inv1 is not None:
        Q = np.einsum("...kij,...ia->...kaj", Q, inv1)
    if inv2 is not None:
        Q = np.einsum("...kaj,...jb->...kab", Q, inv2)
    return bilinear_norm(Q, n1.base, n2.base, out_norm.base)


def _identity_matrix(x, dim):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(np.eye(dim), x.shape[:-1] + (dim, dim))


def _identity_weight(dim):
    return partial(_identity_matrix, dim=dim)


@dataclass(frozen=True)
class FinslerWeight:
    """Position-dependent weights ``A(x)`` on states and ``B(x)`` on parameters.

    ``inv_A_bound`` is a declared bound on ``sup_x ||A(x)^-1||`` and ``b_lip``
    a bound on the ``d_A``-Lipschitz constant of ``x -> ||B(x)||``.
    """

    A: Callable
    B: Callable
    base_x: BaseNorm
    base_theta: BaseNorm
    inv_A_bound: float = 1.0
    b_lip: float = 0.0
    constant: bool = False
    name: str = "weight"

    @classmethod
    def identity(cls, n_x, n_theta, base_x, base_theta, name="identity"):
        return cls(_identity_weight(n_x), _identity_weight(n_theta), base_x, base_theta,
                   inv_A_bound=1.0, b_lip=0.0, constant=True, name=name)

    def norm_at(self, x, which="A"):
        mat = self.A(x) if which == "A" else self.B(x)
        base = self.base_x if which == "A" else self.base_theta
        return WeightedNorm(base, None if self.constant else mat)

    def check(self, xs, cond_limit=1e12):
        """Invertibility and ``||A(x)^-1|| <= inv_A_bound`` at sampled states."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        A = np.asarray(self.A(xs))
        B = np.asarray(self.B(xs))
        cond_a = np.linalg.cond(A)
        cond_b = np.linalg.cond(B)
        inv_norms = operator_norm(np.linalg.inv(A), self.base_x, self.base_x)
        return {
            "invertible": bool(np.all(cond_a < cond_limit) and np.all(cond_b < cond_limit)),
            "max_inv_A_norm": float(inv_norms.max()),
            "inv_A_bound_ok": bool(np.all(inv_norms <= self.inv_A_bound * (1 + 1e-12))),
        }


def weighted_vector_norm(w: FinslerWeight, x, u, which="A"):
    """``||u||_{A(x)} = base(A(x) u)`` (or with ``B`` when ``which == 'B'``)."""
    return w.norm_at(x, which)(u)


def metric_upper(w: FinslerWeight, x, y, segments=DEFAULT_SEGMENTS):
    """Length of the straight chord from ``x`` to ``y`` under ``||.||_{A(.)}``.

    The chord is one admissible path, so this bounds the path-length metric
    ``d_A(x, y)`` from above; it is exact when ``A`` is constant. The integral
    uses the composite trapezoid rule. Batched over leading axes of ``x, y``.
    """
    if segments < 1:
        raise ValueError("segments must be >= 1")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = y - x
    if w.constant:
        return w.base_x(np.einsum("...ij,...j->...i", w.A(x), d))
    t = np.linspace(0.0, 1.0, segments + 1)
    pts = x[..., None, :] + t[:, None] * d[..., None, :]
    vals = w.base_x(np.einsum("...tij,...j->...ti", w.A(pts), d))
    return (vals.sum(axis=-1) - 0.5 * (vals[..., 0] + vals[..., -1])) / segments


def wasserstein1_empirical(samples1, samples2, dist=None):
    """Exact W1 distance between two uniform empirical measures of equal size.

    ``dist(a, b)`` must broadcast over leading axes; the default is the
    Euclidean distance. The optimal coupling of two uniform empirical measures
    of equal size is a permutation, found with the Hungarian method.
    """
    a = np.asarray(samples1, dtype=float)
    b = np.asarray(samples2, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) != len(b):
        raise ValueError(f"sample counts differ ({len(a)} vs {len(b)})")
    if len(a) > MAX_ASSIGNMENT:
        raise ValueError(f"at most {MAX_ASSIGNMENT} samples per side; subsample first")
    if len(a) == 0:
        return 0.0
    if dist is None:
        cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    else:
        cost = np.asarray(dist(a[:, None, :], b[None, :, :]), dtype=float)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(a))
