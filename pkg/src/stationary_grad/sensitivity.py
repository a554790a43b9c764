"""Forward sensitivity estimator of stationary cost derivatives.

The joint recursion carries the state ``x`` and its parameter sensitivity
``m = dx/dtheta``::

    x_{n+1} = f(x_n, xi_{n+1}, theta)
    m_{n+1} = df/dx(x_n, xi_{n+1}, theta) m_n + df/dtheta(x_n, xi_{n+1}, theta)

and ``Delta_n = de/dx(x_n) m_n`` averaged over post-burn-in steps estimates
the derivative of the stationary mean of ``e``.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericalError
from .kernels import linear_recursion
from .model import NoiseFeed, RngStream, SystemModel, state_blocks

WORKERS_ENV = "STATIONARY_GRAD_WORKERS"


@dataclass
class SensState:
    x: np.ndarray
    m: np.ndarray
    step_index: int = 0

    @classmethod
    def start(cls, model, x0=None, m0=None):
        x0 = model.default_x0() if x0 is None else np.asarray(x0, dtype=float)
        m0 = np.zeros((model.state_dim, model.param_dim)) if m0 is None else np.asarray(m0, dtype=float)
        return cls(x0.copy(), m0.copy(), 0)


@dataclass
class GradientEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    replicates: int
    steps_per_replicate: int
    burn_in: int
    seed: int
    cost_name: str
    method: str = "forward"
    replicate_values: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        def clean(a):
            return [None if not math.isfinite(v) else float(v) for v in np.ravel(a)]

        d = {
            "method": self.method,
            "mean": clean(self.mean),
            "stderr": clean(self.stderr),
            "replicates": self.replicates,
            "steps_per_replicate": self.steps_per_replicate,
            "burn_in": self.burn_in,
            "seed": self.seed,
            "cost_name": self.cost_name,
        }
        if self.replicate_values is not None:
            d["replicate_values"] = [clean(r) for r in self.replicate_values]
        d.update(self.extra)
        return d


def default_burn_in(n_steps):
    b = max(1000, n_steps // 10)
    return b if b < n_steps else n_steps // 10


def replicate_stats(values):
    """Mean and standard error over axis 0; stderr is NaN for a single replicate."""
    values = np.asarray(values, dtype=float)
    mean = values.mean(axis=0)
    if len(values) < 2:
        return mean, np.full(mean.shape, np.nan)
    return mean, values.std(axis=0, ddof=1) / math.sqrt(len(values))


def sens_step(model: SystemModel, z: SensState, xi, theta):
    """One step of the joint recursion; Jacobians use the pre-step state and the same noise."""
    fx, jx, jt = model.linearize(z.x, xi, theta)
    m = jx @ z.m + jt
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(m))):
        raise NumericalError(f"non-finite sensitivity state at step {z.step_index + 1}",
                             step=z.step_index + 1)
    return SensState(np.asarray(fx), m, z.step_index + 1)


class JointSystem(SystemModel):
    """The joint recursion as a model on flattened ``z = (x, vec m)`` (row-major ``m``)."""

    def __init__(self, model: SystemModel):
        self.base = model
        self.name = f"joint[{model.name}]"
        self.n = model.state_dim
        self.state_dim = model.state_dim * (1 + model.param_dim)
        self.param_dim = model.param_dim
        self.noise_shape = model.noise_shape

    def split(self, z):
        z = np.asarray(z, dtype=float)
        x = z[..., : self.n]
        m = z[..., self.n:].reshape(z.shape[:-1] + (self.n, self.param_dim))
        return x, m

    def join(self, x, m):
        m = np.asarray(m)
        return np.concatenate([x, m.reshape(m.shape[:-2] + (-1,))], axis=-1)

    def step(self, z, xi, theta):
        x, m = self.split(z)
        fx, jx, jt = self.base.linearize(x, xi, theta)
        return self.join(fx, jx @ m + jt)

    def sample_noise(self, rng, size):
        return self.base.sample_noise(rng, size)


def _forward_chains(model, thetas, cost, x0, m0, feed, n_steps, burn_in,
                    record_every=None, trace_writer=None):
    """Run a batch of joint chains; return per-chain averages of post-burn-in Delta.

    States are advanced one noise block at a time, then the Jacobians of the
    whole block are evaluated at once and fed to the compiled recursion.
    """
    x = np.array(x0, dtype=float)
    m = np.array(m0, dtype=float)
    acc = np.zeros(x.shape[:-1] + (model.param_dim,))
    recorded, rec_steps = [], []
    grad = cost.grad
    for first, states in state_blocks(model, thetas, x, n_steps, feed):
        L = len(states)
        xi = feed.last_block
        prev = np.concatenate([x[None], states[:-1]], axis=0)
        _, jx, jt = model.linearize(prev, xi, thetas)
        M = linear_recursion(jx, jt, m)
        steps = np.arange(first, first + L)
        if not np.all(np.isfinite(M)):
            bad = int(np.argmax(~np.all(np.isfinite(M.reshape(L, -1)), axis=1)))
            raise NumericalError(f"non-finite sensitivity state at step {steps[bad]}",
                                 step=int(steps[bad]))
        keep = steps > burn_in
        if keep.any() or trace_writer is not None or record_every:
            delta = (grad(states)[..., None, :] @ M)[..., 0, :]
            if keep.any():
                part = delta[keep]
                if not np.all(np.isfinite(part)):
                    bad = int(np.argmax(~np.all(np.isfinite(part.reshape(len(part), -1)), axis=1)))
                    step = int(steps[keep][bad])
                    raise NumericalError(f"non-finite cost gradient at step {step}", step=step)
                acc += part.sum(axis=0)
            if record_every:
                sel = steps % record_every == 0
                recorded.extend(delta[sel])
                rec_steps.extend(steps[sel].tolist())
            if trace_writer is not None:
                for t in range(L):
                    trace_writer.writerow([int(steps[t]), *states[t, 0], *np.ravel(M[t, 0]),
                                           *delta[t, 0]])
        x, m = states[-1], M[-1]
    avg = acc / (n_steps - burn_in)
    return avg, x, m, (np.array(rec_steps, dtype=int), np.array(recorded) if recorded else None)


def _check_run_args(n_steps, burn_in):
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0 <= burn_in < n_steps:
        raise ValueError(f"burn_in must satisfy 0 <= burn_in < n_steps (got {burn_in}, {n_steps})")


@dataclass
class GradientRun:
    average: np.ndarray
    state: SensState
    delta_steps: Optional[np.ndarray] = None
    deltas: Optional[np.ndarray] = None


def run_gradient(model, theta, cost, n_steps, burn_in=None, x0=None, m0=None, rng=None,
                 record_every=None, trace_path=None):
    """Single chain of the joint recursion.

    Returns the running average ``A`` of ``Delta_n`` over steps
    ``burn_in + 1 .. n_steps``. ``record_every=k`` keeps every k-th ``Delta``
    (averages always use all terms); ``trace_path`` writes a per-step CSV
    with columns ``step, x..., m..., delta...``.
    """
    burn_in = default_burn_in(n_steps) if burn_in is None else int(burn_in)
    _check_run_args(n_steps, burn_in)
    rng = rng if rng is not None else RngStream(0)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    model.check_theta(theta)
    z0 = SensState.start(model, x0, m0)
    feed = NoiseFeed(model, [rng])
    writer = fh = None
    if trace_path is not None:
        fh = open(trace_path, "w", newline="")
        writer = csv.writer(fh)
        n, p = model.state_dim, model.param_dim
        writer.writerow(["step"] + [f"x{i}" for i in range(n)]
                        + [f"m{i}_{j}" for i in range(n) for j in range(p)]
                        + [f"delta{j}" for j in range(p)])
    try:
        avg, x, m, (steps, deltas) = _forward_chains(
            model, theta, cost, z0.x[None], z0.m[None], feed, n_steps, burn_in,
            record_every, writer)
    finally:
        if fh is not None:
            fh.close()
    return GradientRun(avg[0], SensState(x[0], m[0], n_steps), steps,
                       None if deltas is None else deltas[:, 0])


def _replicate_block(args):
    model, theta, cost, n_steps, burn_in, x0, m0, base_seed, reps = args
    streams = [RngStream(base_seed, r) for r in reps]
    B = len(reps)
    feed = NoiseFeed(model, streams)
    xs = np.broadcast_to(x0, (B,) + x0.shape).copy()
    ms = np.broadcast_to(m0, (B,) + m0.shape).copy()
    avg, *_ = _forward_chains(model, theta, cost, xs, ms, feed, n_steps, burn_in)
    return avg


def worker_count(workers=None):
    if workers is not None:
        return max(1, int(workers))
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_replicate_blocks(fn, make_args, replicates, workers):
    """Split replicate indices into contiguous blocks and evaluate ``fn`` on each."""
    blocks = [b for b in np.array_split(np.arange(replicates), min(workers, replicates)) if len(b)]
    if len(blocks) == 1:
        return [fn(make_args(blocks[0].tolist()))]
    with ProcessPoolExecutor(max_workers=len(blocks)) as ex:
        return list(ex.map(fn, [make_args(b.tolist()) for b in blocks]))


def batch_gradient(model, theta, cost, n_steps, burn_in=None, replicates=8, base_seed=0,
                   x0=None, m0=None, workers=None):
    """Replicated forward-sensitivity estimate; replicate ``r`` uses ``RngStream(base_seed, r)``.

    Replicates are independent chains started from the same ``(x0, m0)``.
    ``stderr`` is NaN when ``replicates == 1``.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    burn_in = default_burn_in(n_steps) if burn_in is None else int(burn_in)
    _check_run_args(n_steps, burn_in)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    model.check_theta(theta)
    z0 = SensState.start(model, x0, m0)
    parts = run_replicate_blocks(
        _replicate_block,
        lambda reps: (model, theta, cost, n_steps, burn_in, z0.x, z0.m, base_seed, reps),
        replicates, worker_count(workers))
    values = np.concatenate(parts, axis=0)
    mean, se = replicate_stats(values)
    return GradientEstimate(mean, se, replicates, n_steps, burn_in, base_seed, cost.name,
                            "forward", values)
