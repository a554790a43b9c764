"""Cost registry.

``coordinate(i)`` has bounded first and second derivatives, so it belongs to
the admissible cost class for every bundled weight (all weights satisfy
``g >= 1``). ``quadratic`` has an unbounded gradient: with identity weights it
is outside that class, and with the exponential weights of the
two-dimensional example ``|de/dx_i| / g_i`` stays bounded, so it is admissible
there. For AR(1) it is checked against the finite-difference oracle
empirically rather than covered by the convergence guarantee.
"""

from __future__ import annotations

import re
from functools import partial

import numpy as np

from .model import CostFunction

_REGISTRY = {}


def register_cost(name, factory):
    """Register ``factory(arg: str | None) -> CostFunction`` under ``name``."""
    _REGISTRY[name] = factory


def registered_costs():
    return sorted(_REGISTRY)


def _coord_eval(x, i):
    return np.asarray(x, dtype=float)[..., i]


def _coord_grad(x, i):
    x = np.asarray(x, dtype=float)
    g = np.zeros(x.shape)
    g[..., i] = 1.0
    return g


def _zero_hess(x):
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape + (x.shape[-1],))


def _quad_eval(x):
    x = np.asarray(x, dtype=float)
    return np.sum(x * x, axis=-1)


def _quad_grad(x):
    return 2.0 * np.asarray(x, dtype=float)


def _quad_hess(x):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(2.0 * np.eye(x.shape[-1]), x.shape + (x.shape[-1],)).copy()


def coordinate(i):
    i = int(i)
    return CostFunction(f"coordinate({i})", partial(_coord_eval, i=i), partial(_coord_grad, i=i),
                        _zero_hess)


def quadratic():
    return CostFunction("quadratic", _quad_eval, _quad_grad, _quad_hess)


register_cost("coordinate", lambda arg: coordinate(0 if arg in (None, "") else arg))
register_cost("quadratic", lambda arg: quadratic())

_NAME_RE = re.compile(r"^\s*([A-Za-z_][\w\-]*)\s*(?:\(\s*([^)]*)\s*\))?\s*$")


def cost_registry_lookup(name):
    """Resolve ``'coordinate(0)'``, ``'quadratic'`` or a custom registered name."""
    m = _NAME_RE.match(str(name))
    if not m or m.group(1) not in _REGISTRY:
        raise KeyError(f"unknown cost {name!r}; registered costs: {', '.join(registered_costs())}")
    return _REGISTRY[m.group(1)](m.group(2))
