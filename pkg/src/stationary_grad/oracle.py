"""Brute-force reference values: long-run cost averages and finite differences.

Nothing here touches the sensitivity recursion. Gradients come from central
differences of simulated stationary costs, with the plus and minus runs of a
replicate sharing one noise stream when ``crn`` is on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParameterRegionError
from .model import NoiseFeed, RngStream, state_blocks
from .sensitivity import (GradientEstimate, default_burn_in, replicate_stats,
                          run_replicate_blocks, worker_count, _check_run_args)


@dataclass
class StationaryCostEstimate:
    mean: float
    stderr: float
    n_steps: int
    burn_in: int
    replicates: int
    seed: int
    replicate_values: np.ndarray = None

    def to_dict(self):
        def clean(v):
            return None if not math.isfinite(v) else float(v)

        d = {"mean": clean(self.mean), "stderr": clean(self.stderr), "n_steps": self.n_steps,
             "burn_in": self.burn_in, "replicates": self.replicates, "seed": self.seed}
        if self.replicate_values is not None:
            d["replicate_values"] = [clean(v) for v in self.replicate_values]
        return d


def _cost_averages(model, thetas, cost, x0, feed, n_steps, burn_in):
    """Post-burn-in time average of ``cost`` for each chain in the batch."""
    acc = np.zeros(len(thetas))
    for first, states in state_blocks(model, thetas, x0, n_steps, feed):
        skip = max(0, burn_in + 1 - first)
        if skip >= len(states):
            continue
        vals = cost.eval(states[skip:])
        if not np.all(np.isfinite(vals)):
            bad = int(np.argmax(~np.all(np.isfinite(vals), axis=1)))
            step = first + skip + bad
            raise NumericalError(f"non-finite cost at step {step}", step=step)
        acc += vals.sum(axis=0)
    return acc / (n_steps - burn_in)


def _x0_batch(model, x0, count):
    x0 = model.default_x0() if x0 is None else np.asarray(x0, dtype=float).reshape(model.state_dim)
    return np.broadcast_to(x0, (count, model.state_dim)).copy()


def _cost_block(args):
    model, theta, cost, n_steps, burn_in, x0, seed, reps = args
    feed = NoiseFeed(model, [RngStream(seed, r) for r in reps])
    thetas = np.broadcast_to(theta, (len(reps), len(theta)))
    return _cost_averages(model, thetas, cost, _x0_batch(model, x0, len(reps)), feed,
                          n_steps, burn_in)


def stationary_cost(model, theta, cost, n_steps, burn_in=None, replicates=8, seed=0,
                    x0=None, workers=None):
    """Replicate-averaged long-run mean of ``cost``; replicate ``r`` uses ``RngStream(seed, r)``."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    burn_in = default_burn_in(n_steps) if burn_in is None else int(burn_in)
    _check_run_args(n_steps, burn_in)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    model.check_theta(theta)
    parts = run_replicate_blocks(
        _cost_block, lambda reps: (model, theta, cost, n_steps, burn_in, x0, seed, reps),
        replicates, worker_count(workers))
    values = np.concatenate(parts)
    mean, se = replicate_stats(values)
    return StationaryCostEstimate(float(mean), float(se), n_steps, burn_in, replicates, seed,
                                  values)


def default_fd_step(theta):
    return 1e-3 * (1.0 + np.abs(np.asarray(theta, dtype=float)))


def _fd_block(args):
    model, theta, h, cost, n_steps, burn_in, x0, seed, reps, crn = args
    p = len(theta)
    R = len(reps)
    # chain (r, j, s): replicate r, component j, sign s (0: +h, 1: -h)
    shifts = np.zeros((p, 2, p))
    idx = np.arange(p)
    shifts[idx, 0, idx] = h
    shifts[idx, 1, idx] = -h
    thetas = np.tile((theta + shifts).reshape(2 * p, p), (R, 1))
    if crn:
        streams = [RngStream(seed, r) for r in reps]
        chain_map = np.repeat(np.arange(R), 2 * p)
    else:
        streams = [RngStream(seed, r * 2 * p + c) for r in reps for c in range(2 * p)]
        chain_map = None
    feed = NoiseFeed(model, streams, chain_map)
    avg = _cost_averages(model, thetas, cost, _x0_batch(model, x0, len(thetas)), feed,
                         n_steps, burn_in).reshape(R, p, 2)
    return (avg[..., 0] - avg[..., 1]) / (2.0 * h)


def fd_gradient(model, theta, cost, h=None, n_steps=100_000, burn_in=None, replicates=8, seed=0,
                crn=True, x0=None, workers=None):
    """Central finite-difference gradient of the stationary cost.

    Component ``j`` is ``[pi(e; theta + h_j e_j) - pi(e; theta - h_j e_j)] / (2 h_j)``,
    each cost estimated by a post-burn-in time average. With ``crn`` the
    ``2 * n_params`` runs of a replicate read the same stream
    ``RngStream(seed, r)``; otherwise every run gets its own stream. The
    standard error comes from the spread of per-replicate differences.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    burn_in = default_burn_in(n_steps) if burn_in is None else int(burn_in)
    _check_run_args(n_steps, burn_in)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    h = default_fd_step(theta) if h is None else np.broadcast_to(
        np.asarray(h, dtype=float), theta.shape).copy()
    if np.any(h <= 0) or not np.all(np.isfinite(h)):
        raise ValueError("finite-difference steps must be positive")
    model.check_theta(theta)
    for j in range(len(theta)):
        for sign in (1.0, -1.0):
            shifted = theta.copy()
            shifted[j] += sign * h[j]
            try:
                model.check_theta(shifted)
            except ParameterRegionError as exc:
                raise ParameterRegionError(
                    f"theta {'+' if sign > 0 else '-'} h along component {j} leaves the "
                    f"parameter region: {exc}") from exc
    parts = run_replicate_blocks(
        _fd_block,
        lambda reps: (model, theta, h, cost, n_steps, burn_in, x0, seed, reps, crn),
        replicates, worker_count(workers))
    values = np.concatenate(parts, axis=0)
    mean, se = replicate_stats(values)
    return GradientEstimate(mean, se, replicates, n_steps, burn_in, seed, cost.name, "fd",
                            values, {"h": h.tolist(), "crn": bool(crn)})
