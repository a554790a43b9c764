"""System abstraction: parameterized random recursions, costs and noise streams.

Every model works on batched arrays. States have shape ``(..., n_x)``,
parameters ``(..., n_theta)`` and noise ``(..., *noise_shape)``; leading axes
broadcast. Second derivatives use the layout ``H[..., k, i, j]`` for the
``k``-th output differentiated along input directions ``i`` then ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import MissingDerivativeError, NumericalError

# Noise is drawn per stream in blocks of this many steps. The noise sequence of
# a stream is a fixed function of (seed, stream_id, model) because of it.
NOISE_CHUNK = 1024


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``low <= x <= high``."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=float)
        high = np.asarray(self.high, dtype=float)
        if low.shape != high.shape or np.any(low > high):
            raise ValueError("box bounds must have equal shapes and low <= high")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    def contains(self, x, atol=0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.low - atol) & (x <= self.high + atol), axis=-1)

    def sample(self, rng, count):
        return rng.uniform(self.low, self.high, size=(count,) + self.low.shape)


@dataclass
class RngStream:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Two streams with identical identifiers produce identical noise, which is
    what common-random-numbers couplings rely on.
    """

    seed: int
    stream_id: int = 0
    path: tuple = ()
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        key = (int(self.stream_id) & (2**64 - 1),) + tuple(int(p) for p in self.path)
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def fork(self, sub_id):
        """Independent child stream; distinct from every plain ``(seed, stream_id)`` stream."""
        return RngStream(self.seed, self.stream_id, self.path + (int(sub_id),))

    @property
    def counter(self):
        return self.generator.bit_generator.state["state"]["state"]


class NoiseFeed:
    """Hands out noise per chain, one step or one block of steps at a time.

    ``chain_map[b]`` names the stream chain ``b`` reads from. Chains mapped to
    the same stream receive identical noise (common random numbers).
    """

    def __init__(self, model, streams: Sequence[RngStream], chain_map=None):
        self.model = model
        self.streams = list(streams)
        if chain_map is None:
            chain_map = np.arange(len(self.streams))
        self.chain_map = np.asarray(chain_map, dtype=int)
        self._identity = np.array_equal(self.chain_map, np.arange(len(self.streams)))
        self._block = None
        self._pos = NOISE_CHUNK
        self.last_block = None

    def _refill(self):
        draws = [self.model.sample_noise(s.generator, NOISE_CHUNK) for s in self.streams]
        block = np.stack(draws, axis=1)
        if not self._identity:
            block = block[:, self.chain_map]
        self._block = block
        self._pos = 0

    def next(self):
        """Noise for one step, shape ``(n_chains, *noise_shape)``."""
        if self._pos >= NOISE_CHUNK:
            self._refill()
        xi = self._block[self._pos]
        self._pos += 1
        return xi

    def next_block(self, length=NOISE_CHUNK):
        """Noise for ``length`` consecutive steps, shape ``(length, n_chains, *noise_shape)``."""
        parts = []
        need = length
        while need > 0:
            if self._pos >= NOISE_CHUNK:
                self._refill()
            take = min(need, NOISE_CHUNK - self._pos)
            parts.append(self._block[self._pos:self._pos + take])
            self._pos += take
            need -= take
        block = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)
        self.last_block = block
        return block


def advance_states(model, x, thetas, xi_block, start_step=0):
    """Apply ``step`` once per noise row; return the visited states ``(L, *x.shape)``.

    Raises :class:`NumericalError` naming the first step (counted from
    ``start_step + 1``) whose state is non-finite.
    """
    L = len(xi_block)
    out = model.advance(x, thetas, xi_block)
    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.all(np.isfinite(out.reshape(L, -1)), axis=1)))
        raise NumericalError(f"non-finite state at step {start_step + bad + 1}",
                             step=start_step + bad + 1)
    return out


def state_blocks(model, thetas, x0, n_steps, feed):
    """Advance a batch of chains block by block.

    Yields ``(first_step, states)`` with ``states[t]`` the state after step
    ``first_step + t``; steps are counted from 1.
    """
    x = np.array(x0, dtype=float)
    done = 0
    while done < n_steps:
        L = min(NOISE_CHUNK, n_steps - done)
        states = advance_states(model, x, thetas, feed.next_block(L), done)
        yield done + 1, states
        x = states[-1]
        done += L


class SystemModel:
    """Base class for a parameterized random recursion ``x' = f(x, xi, theta)``.

    Subclasses implement :meth:`step`, :meth:`jac_x`, :meth:`jac_theta` and
    :meth:`sample_noise`; second derivatives are optional. Instances are
    immutable after construction and safe to share.
    """

    name = "model"
    state_dim: int
    param_dim: int
    noise_shape: tuple = ()
    # None means all of R^n.
    state_domain: Optional[Box] = None

    def step(self, x, xi, theta):
        raise NotImplementedError

    def jac_x(self, x, xi, theta):
        raise NotImplementedError

    def jac_theta(self, x, xi, theta):
        raise NotImplementedError

    def hess_xx(self, x, xi, theta):
        raise MissingDerivativeError(f"{self.name} does not provide d2f/dx2")

    def hess_thetatheta(self, x, xi, theta):
        raise MissingDerivativeError(f"{self.name} does not provide d2f/dtheta2")

    def hess_xtheta(self, x, xi, theta):
        raise MissingDerivativeError(f"{self.name} does not provide d2f/dxdtheta")

    @property
    def has_hessians(self):
        cls = type(self)
        return all(getattr(cls, m) is not getattr(SystemModel, m)
                   for m in ("hess_xx", "hess_thetatheta", "hess_xtheta"))

    def advance(self, x, theta, xi_block):
        """States after each step of a noise block, shape ``(L, *x.shape)``.

        Models may override this with a compiled or closed-form version; it
        must agree with repeated :meth:`step` calls.
        """
        out = np.empty((len(xi_block),) + np.shape(x))
        step = self.step
        for t in range(len(xi_block)):
            x = step(x, xi_block[t], theta)
            out[t] = x
        return out

    def linearize(self, x, xi, theta):
        """Return ``(f, df/dx, df/dtheta)`` at the same point; override to share work."""
        return self.step(x, xi, theta), self.jac_x(x, xi, theta), self.jac_theta(x, xi, theta)

    def sample_noise(self, rng, size):
        """Draw ``size`` i.i.d. noise values, shape ``(size, *noise_shape)``."""
        raise NotImplementedError

    def check_theta(self, theta):
        """Raise :class:`ParameterRegionError` when ``theta`` is outside the parameter region."""

    def theta_in_region(self, theta):
        try:
            self.check_theta(theta)
        except ValueError:
            return False
        return True

    def default_x0(self):
        return np.zeros(self.state_dim)


@dataclass(frozen=True)
class CostFunction:
    """Smooth scalar cost on states, with gradient and optional Hessian (batched)."""

    name: str
    eval: Callable
    grad: Callable
    hess: Optional[Callable] = None

    def __call__(self, x):
        return self.eval(x)


def _fd_step(v):
    return 1e-6 * (1.0 + np.abs(v))


def _central_diff(fun, v, axis_len):
    """Central differences of ``fun`` w.r.t. each coordinate of ``v``; derivative axis last."""
    cols = []
    for j in range(axis_len):
        h = _fd_step(v[j])
        vp = v.copy()
        vm = v.copy()
        vp[j] += h
        vm[j] -= h
        cols.append((np.asarray(fun(vp)) - np.asarray(fun(vm))) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass
class DerivativeReport:
    max_rel_error: dict
    failures: list
    tol: float
    hess_tol: float

    @property
    def ok(self):
        return not self.failures

    def to_dict(self):
        return {"ok": self.ok, "tol": self.tol, "hess_tol": self.hess_tol,
                "max_rel_error": dict(self.max_rel_error), "failures": list(self.failures)}


def _rel_err(analytic, fd):
    return np.abs(analytic - fd) / (1.0 + np.abs(fd))


def validate_derivatives(model, theta, points=16, tol=1e-5, hess_tol=1e-4, rng=None):
    """Compare analytic derivatives with central finite differences.

    ``points`` is either a count (drawn from the state domain) or an array of
    states. For each point one noise value is drawn. Returns a
    :class:`DerivativeReport` with the max relative error per derivative and
    one failure record per offending point.
    """
    rng = rng if rng is not None else RngStream(0)
    gen = rng.generator if isinstance(rng, RngStream) else rng
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if isinstance(points, (int, np.integer)):
        if model.state_domain is not None:
            xs = model.state_domain.sample(gen, int(points))
        else:
            xs = gen.standard_normal((int(points), model.state_dim))
    else:
        xs = np.atleast_2d(np.asarray(points, dtype=float))
    noise = model.sample_noise(gen, len(xs))

    checks = [
        ("jac_x", tol, lambda x, xi: model.jac_x(x, xi, theta),
         lambda x, xi: _central_diff(lambda v: model.step(v, xi, theta), x, model.state_dim)),
        ("jac_theta", tol, lambda x, xi: model.jac_theta(x, xi, theta),
         lambda x, xi: _central_diff(lambda t: model.step(x, xi, t), theta, model.param_dim)),
    ]
    if model.has_hessians:
        checks += [
            ("hess_xx", hess_tol, lambda x, xi: model.hess_xx(x, xi, theta),
             lambda x, xi: _central_diff(lambda v: model.jac_x(v, xi, theta), x, model.state_dim)),
            ("hess_thetatheta", hess_tol, lambda x, xi: model.hess_thetatheta(x, xi, theta),
             lambda x, xi: _central_diff(lambda t: model.jac_theta(x, xi, t), theta, model.param_dim)),
            ("hess_xtheta", hess_tol, lambda x, xi: model.hess_xtheta(x, xi, theta),
             lambda x, xi: _central_diff(lambda t: model.jac_x(x, xi, t), theta, model.param_dim)),
        ]

    max_err = {name: 0.0 for name, *_ in checks}
    failures = []
    for p, (x, xi) in enumerate(zip(xs, noise)):
        for name, limit, analytic_fn, fd_fn in checks:
            with np.errstate(all="ignore"):
                analytic = np.asarray(analytic_fn(x, xi), dtype=float)
                fd = np.asarray(fd_fn(x, xi), dtype=float)
            if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(fd))):
                failures.append({"derivative": name, "point": x.tolist(), "entry": None,
                                 "error": "non-finite model output"})
                max_err[name] = float("inf")
                continue
            err = _rel_err(analytic, fd)
            worst = float(err.max()) if err.size else 0.0
            max_err[name] = max(max_err[name], worst)
            if worst > limit:
                entry = np.unravel_index(int(np.argmax(err)), err.shape)
                failures.append({"derivative": name, "point": x.tolist(),
                                 "entry": [int(i) for i in entry], "error": worst})
    return DerivativeReport(max_err, failures, tol, hess_tol)


def validate_cost(cost: CostFunction, points, tol=1e-5):
    """Max relative error of ``cost.grad`` (and ``cost.hess`` if given) against central differences."""
    xs = np.atleast_2d(np.asarray(points, dtype=float))
    n = xs.shape[-1]
    out = {"grad": 0.0}
    if cost.hess is not None:
        out["hess"] = 0.0
    for x in xs:
        fd = _central_diff(lambda v: cost.eval(v), x, n)
        out["grad"] = max(out["grad"], float(_rel_err(np.asarray(cost.grad(x)), fd).max()))
        if cost.hess is not None:
            fdh = _central_diff(lambda v: cost.grad(v), x, n)
            out["hess"] = max(out["hess"], float(_rel_err(np.asarray(cost.hess(x)), fdh).max()))
    out["ok"] = out["grad"] <= tol and out.get("hess", 0.0) <= 1e-4
    return out


def simulate(model, theta, x0, n, rng, thin=1, return_noise=False):
    """Simulate one trajectory of length ``n + 1`` (``trajectory[0] == x0``).

    With ``thin > 1`` only every ``thin``-th state is kept (``x0`` always is).
    With ``return_noise`` the consumed noise values are returned as well.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    x0 = np.asarray(x0, dtype=float).reshape(model.state_dim)
    feed = NoiseFeed(model, [rng])
    states, noise = [x0[None]], []
    x = x0[None, :]
    done = 0
    while done < n:
        L = min(NOISE_CHUNK, n - done)
        xi = feed.next_block(L)
        block = advance_states(model, x, theta, xi, done)
        states.append(block[:, 0])
        if return_noise:
            noise.append(xi[:, 0])
        x = block[-1]
        done += L
    traj = np.concatenate(states, axis=0)
    if thin > 1:
        traj = traj[::thin]
    if return_noise:
        return traj, np.concatenate(noise, axis=0)
    return traj
