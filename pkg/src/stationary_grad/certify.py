"""Empirical contraction certificates.

Suprema over the state and parameter spaces are replaced by maxima over a
sampled compact region, and noise integrals by Monte Carlo averages. Every
result is therefore labelled empirical: it is evidence that the estimator's
preconditions hold on the region, not a proof.

Point ``i`` of a region always draws its noise from ``RngStream(seed, i)``,
so per-point values do not depend on how points are split across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import MissingDerivativeError, ModelConditionError
from .finsler import (FinslerWeight, WeightedNorm, induced_bilinear_norm,
                      induced_operator_norm, metric_upper, operator_norm,
                      wasserstein1_empirical)
from .model import RngStream
from .sensitivity import JointSystem, run_replicate_blocks, worker_count

SLACK = 1.05
DEFAULT_NOISE = 2048
DEFAULT_POINTS = 256
COEFFICIENTS = ("X", "Theta", "X2", "Theta2", "XTheta")
CHORD_CAVEAT = ("distances use the straight-chord upper bound of d_A; with a non-constant "
                "weight both sides of a ratio are biased in an uncontrolled direction")


# --------------------------------------------------------------------------- sampling

@dataclass(frozen=True)
class RegionSampler:
    """Points of a box in state x parameter space, on a grid or drawn uniformly.

    Parameter bounds may be omitted, in which case the parameter coordinates
    are filled from the ``theta`` passed to :meth:`points`.
    """

    x_low: tuple
    x_high: tuple
    theta_low: Optional[tuple] = None
    theta_high: Optional[tuple] = None
    mode: str = "uniform"
    count: int = DEFAULT_POINTS
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("grid", "uniform"):
            raise ValueError(f"sampler mode must be 'grid' or 'uniform', got {self.mode!r}")
        if self.count < 1:
            raise ValueError("sampler count must be >= 1")
        for lo, hi in ((self.x_low, self.x_high), (self.theta_low, self.theta_high)):
            if (lo is None) != (hi is None):
                raise ValueError("give both bounds of a box or neither")
            if lo is not None:
                lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
                if lo.shape != hi.shape or np.any(lo > hi):
                    raise ValueError("box bounds need matching shapes and low <= high")
        object.__setattr__(self, "x_low", tuple(np.ravel(self.x_low).astype(float)))
        object.__setattr__(self, "x_high", tuple(np.ravel(self.x_high).astype(float)))
        if self.theta_low is not None:
            object.__setattr__(self, "theta_low", tuple(np.ravel(self.theta_low).astype(float)))
            object.__setattr__(self, "theta_high", tuple(np.ravel(self.theta_high).astype(float)))

    @classmethod
    def box(cls, x_low, x_high, theta_low=None, theta_high=None, **kw):
        return cls(tuple(np.ravel(x_low)), tuple(np.ravel(x_high)),
                   None if theta_low is None else tuple(np.ravel(theta_low)),
                   None if theta_high is None else tuple(np.ravel(theta_high)), **kw)

    def _bounds(self, model):
        lo, hi = np.array(self.x_low), np.array(self.x_high)
        if len(lo) != model.state_dim:
            raise ValueError(f"region has {len(lo)} state coordinates, model has {model.state_dim}")
        dom = model.state_domain
        if dom is not None:
            lo, hi = np.maximum(lo, dom.low), np.minimum(hi, dom.high)
            if np.any(lo > hi):
                raise ValueError("region does not meet the model's state domain")
        if self.theta_low is None:
            return lo, hi, None, None
        tlo, thi = np.array(self.theta_low), np.array(self.theta_high)
        if len(tlo) != model.param_dim:
            raise ValueError(f"region has {len(tlo)} parameter coordinates, model has {model.param_dim}")
        return lo, hi, tlo, thi

    def points(self, model, theta=None):
        """``(xs, thetas)`` of shapes ``(count, n_x)`` and ``(count, n_theta)``."""
        lo, hi, tlo, thi = self._bounds(model)
        if tlo is None:
            if theta is None:
                raise ValueError("region has no parameter box; pass theta")
            theta = np.asarray(theta, dtype=float).reshape(-1)
            tlo = thi = theta
        low = np.concatenate([lo, tlo])
        high = np.concatenate([hi, thi])
        if self.mode == "uniform":
            rng = np.random.default_rng(self.seed)
            pts = low + (high - low) * rng.random((self.count, len(low)))
        else:
            pts = _grid(low, high, self.count)
        n = model.state_dim
        return pts[:, :n], pts[:, n:]

    def to_dict(self):
        return {"mode": self.mode, "count": self.count, "seed": self.seed,
                "x_low": list(self.x_low), "x_high": list(self.x_high),
                "theta_low": None if self.theta_low is None else list(self.theta_low),
                "theta_high": None if self.theta_high is None else list(self.theta_high)}


def _grid(low, high, count):
    free = np.flatnonzero(high > low)
    pts = np.tile(low, (count, 1))
    if len(free) == 0:
        return pts
    k = max(2, math.ceil(count ** (1.0 / len(free)) - 1e-9))
    axes = [np.linspace(low[i], high[i], k) for i in free]
    full = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(free))
    pick = np.unique(np.round(np.linspace(0, len(full) - 1, min(count, len(full)))).astype(int))
    pts = np.tile(low, (len(pick), 1))
    pts[:, free] = full[pick]
    return pts


def _as_points(model, region, theta):
    if isinstance(region, RegionSampler):
        return region.points(model, theta)
    xs = np.atleast_2d(np.asarray(region, dtype=float))
    th = np.asarray(theta, dtype=float).reshape(-1)
    return xs, np.broadcast_to(th, (len(xs), len(th))).copy()


# --------------------------------------------------------------------------- coefficients

@dataclass
class LEstimate:
    """Per-point coefficient values and their maximum over the region."""

    which: str
    values: np.ndarray
    stderrs: np.ndarray
    sup: float
    sup_stderr: float
    argmax: int
    n_noise: int

    def to_dict(self):
        return {"which": self.which, "sup": self.sup, "sup_stderr": self.sup_stderr,
                "argmax": self.argmax, "n_noise": self.n_noise, "points": len(self.values)}


def _coefficient_samples(model, weight, x, theta, xi, which):
    """Induced norms of one derivative of ``f`` for each noise draw at a fixed point."""
    k = len(xi)
    xb = np.broadcast_to(x, (k, len(x)))
    y = model.step(xb, xi, theta)
    a_in = weight.norm_at(x, "A")
    b_in = weight.norm_at(x, "B")
    a_out = weight.norm_at(y, "A")
    if which == "X":
        return induced_operator_norm(model.jac_x(xb, xi, theta), a_in, a_out)
    if which == "Theta":
        return induced_operator_norm(model.jac_theta(xb, xi, theta), b_in, a_out)
    if which == "X2":
        return induced_bilinear_norm(model.hess_xx(xb, xi, theta), (a_in, a_in), a_out)
    if which == "Theta2":
        return induced_bilinear_norm(model.hess_thetatheta(xb, xi, theta), (b_in, b_in), a_out)
    if which == "XTheta":
        return induced_bilinear_norm(model.hess_xtheta(xb, xi, theta), (a_in, b_in), a_out)
    raise ValueError(f"unknown coefficient {which!r}; expected one of {COEFFICIENTS}")


def _power_mean(samples, p):
    """``(mean s^p)^(1/p)`` and its delta-method standard error."""
    s = np.asarray(samples, dtype=float)
    n = len(s)
    if p == 1:
        return float(s.mean()), float(s.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    sq = s**2
    mean_sq = float(sq.mean())
    val = math.sqrt(mean_sq)
    if n < 2:
        return val, math.nan
    se_sq = float(sq.std(ddof=1) / math.sqrt(n))
    return val, (se_sq / (2 * val) if val > 0 else 0.0)


def _l_block(args):
    model, weight, which, xs, thetas, n_noise, seed, idx = args
    out = np.empty((len(idx), 2))
    p = 2 if which in ("X", "Theta") else 1
    for row, i in enumerate(idx):
        xi = model.sample_noise(RngStream(seed, i).generator, n_noise)
        s = _coefficient_samples(model, weight, xs[i], thetas[i], xi, which)
        out[row] = _power_mean(s, p)
    return out


def estimate_L(model, weight: FinslerWeight, region, which="X", n_noise=DEFAULT_NOISE, seed=0,
               theta=None, workers=None):
    """Monte Carlo estimate of a derivative coefficient at every region point.

    ``X`` and ``Theta`` use the root-mean-square of the induced operator norm
    of ``df/dx`` and ``df/dtheta``; ``X2``, ``Theta2`` and ``XTheta`` use the
    plain mean of the induced bilinear norm of the second derivatives. The
    returned ``sup`` is the largest point value and ``sup_stderr`` its
    standard error.
    """
    if which not in COEFFICIENTS:
        raise ValueError(f"unknown coefficient {which!r}; expected one of {COEFFICIENTS}")
    if n_noise < 2:
        raise ValueError("n_noise must be >= 2")
    xs, thetas = _as_points(model, region, theta)
    if which in ("X2", "Theta2", "XTheta") and not model.has_hessians:
        raise MissingDerivativeError(f"{model.name} does not provide second derivatives")
    for th in np.unique(thetas, axis=0):
        model.check_theta(th)
    parts = run_replicate_blocks(
        _l_block, lambda idx: (model, weight, which, xs, thetas, n_noise, seed, idx),
        len(xs), worker_count(workers))
    res = np.concatenate(parts, axis=0)
    values, stderrs = res[:, 0], res[:, 1]
    i = int(np.argmax(values))
    return LEstimate(which, values, stderrs, float(values[i]), float(stderrs[i]), i, n_noise)


# --------------------------------------------------------------------------- drift

@dataclass
class LyapunovFit:
    """Least-squares line ``(P V^p)^(1/p) ~ beta V + K`` over sampled points."""

    beta: float
    K: float
    max_violation: float
    degenerate: bool
    p: int
    points: int
    mean_lhs: float = math.nan

    @property
    def drift_ok(self):
        return self.beta < 1.0

    @property
    def poor_fit(self):
        """Largest residual above the line exceeds 10% of the average left side."""
        return bool(self.max_violation > 0.1 * self.mean_lhs)

    def to_dict(self):
        return {"beta": self.beta, "K": self.K, "max_violation": self.max_violation,
                "degenerate": self.degenerate, "p": self.p, "points": self.points,
                "drift_ok": self.drift_ok, "poor_fit": self.poor_fit}


def check_lyapunov(model, theta, V: Callable, region, n_noise=DEFAULT_NOISE, p=2, seed=0):
    """Fit the drift inequality ``(E V(f(x, xi))^p)^(1/p) <= beta V(x) + K``.

    ``region`` is a :class:`RegionSampler` or an array of states. The
    reported ``max_violation`` is the largest amount by which a point's
    left side exceeds the fitted line. When ``V`` takes a single value on the
    sample the slope is unidentifiable: ``beta`` is set to 0, ``K`` to the
    mean left side, and the fit is flagged degenerate.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    xs, thetas = _as_points(model, region, theta)
    if len(xs) < 2:
        raise ValueError("the drift fit needs at least 2 points")
    model.check_theta(thetas[0])
    v0 = np.asarray(V(xs), dtype=float)
    if np.any(v0 < 1.0 - 1e-12):
        raise ValueError("V must be >= 1 on the sampled points")
    lhs = np.empty(len(xs))
    for i, x in enumerate(xs):
        xi = model.sample_noise(RngStream(seed, i).generator, n_noise)
        y = model.step(np.broadcast_to(x, (n_noise, len(x))), xi, thetas[i])
        lhs[i] = np.mean(np.asarray(V(y), dtype=float) ** p) ** (1.0 / p)
    spread = np.ptp(v0)
    if spread <= 1e-12 * (1.0 + np.abs(v0).max()):
        beta, K, degenerate = 0.0, float(lhs.mean()), True
    else:
        design = np.column_stack([v0, np.ones_like(v0)])
        (beta, K), *_ = np.linalg.lstsq(design, lhs, rcond=None)
        degenerate = False
    viol = float(np.max(lhs - (beta * v0 + K)))
    return LyapunovFit(float(beta), float(K), viol, degenerate, p, len(xs), float(lhs.mean()))


# --------------------------------------------------------------------------- interconnection

@dataclass
class Interconnection:
    feasible: bool
    eta1: Optional[float] = None
    eta2: Optional[float] = None
    factor: Optional[float] = None

    def to_dict(self):
        return {"feasible": self.feasible, "eta1": self.eta1, "eta2": self.eta2,
                "factor": self.factor}


def check_interconnection(alpha1, alpha2, K1, K2):
    """Gains making a cascade of two contracting systems contract jointly.

    Feasible when ``K1 K2 < (1 - alpha1)(1 - alpha2)``. Then ``eta1 = 1`` and
    ``eta2`` is the geometric mean of the open interval
    ``(K1 / (1 - alpha2), (1 - alpha1) / K2)``. A zero coupling leaves one end
    of the interval open; ``eta2 = 1`` is used when it lies inside. The
    ``factor`` is the contraction factor of the weighted sum metric.
    """
    for a in (alpha1, alpha2):
        if not 0.0 <= a < 1.0:
            raise ValueError(f"contraction factors must lie in [0, 1), got {a}")
    if K1 < 0 or K2 < 0:
        raise ValueError("coupling gains must be >= 0")
    if not K1 * K2 < (1 - alpha1) * (1 - alpha2):
        return Interconnection(False)
    lo = K1 / (1 - alpha2)
    hi = math.inf if K2 == 0 else (1 - alpha1) / K2
    if K1 == 0 and K2 == 0:
        eta2 = 1.0
    elif math.isinf(hi):
        eta2 = 1.0 if lo < 1.0 else 2.0 * lo
    elif lo == 0:
        eta2 = 1.0 if hi > 1.0 else hi / 2.0
    else:
        eta2 = math.sqrt(lo * hi)
    factor = max(alpha1 + eta2 * K2, alpha2 + K1 / eta2)
    return Interconnection(True, 1.0, eta2, factor)


# --------------------------------------------------------------------------- reports

@dataclass
class ContractionReport:
    coefficients: dict
    contraction_ok: bool
    lyapunov: Optional[LyapunovFit] = None
    etas: Optional[list] = None
    joint_factor: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def coefficient(self, which):
        c = self.coefficients.get(which)
        return None if c is None else c.sup

    @property
    def K_X(self):
        return self.coefficient("X")

    @property
    def K_Theta(self):
        return self.coefficient("Theta")

    @property
    def K_X2(self):
        return self.coefficient("X2")

    @property
    def K_Theta2(self):
        return self.coefficient("Theta2")

    @property
    def K_XTheta(self):
        return self.coefficient("XTheta")

    @property
    def lyapunov_beta(self):
        return None if self.lyapunov is None else self.lyapunov.beta

    @property
    def lyapunov_K(self):
        return None if self.lyapunov is None else self.lyapunov.K

    def to_dict(self):
        def num(v):
            return None if v is None or not math.isfinite(v) else float(v)

        coeffs = {}
        for name in COEFFICIENTS:
            c = self.coefficients.get(name)
            coeffs[f"K_{name}"] = None if c is None else {
                "value": num(c.sup), "stderr": num(c.sup_stderr),
                "max_point_stderr": num(float(np.nanmax(c.stderrs))) if len(c.stderrs) else None}
        return {
            "certificate": "empirical",
            "coefficients": coeffs,
            "contraction_ok": self.contraction_ok,
            "lyapunov_beta": num(self.lyapunov_beta),
            "lyapunov_K": num(self.lyapunov_K),
            "lyapunov": None if self.lyapunov is None else self.lyapunov.to_dict(),
            "etas": None if self.etas is None else [num(e) for e in self.etas],
            "joint_factor": num(self.joint_factor),
            "metadata": self.metadata,
        }


def contraction_flag(est: LEstimate):
    """``K_X + 2 * (largest per-point stderr) < 1``."""
    worst = float(np.nanmax(est.stderrs)) if np.any(np.isfinite(est.stderrs)) else 0.0
    return bool(est.sup + 2.0 * worst < 1.0)


# --------------------------------------------------------------------------- joint metric

def _m_norm(weight, x, m):
    """``||A(x) m||`` as a map from the parameter base norm to the state base norm."""
    return induced_operator_norm(m, WeightedNorm(weight.base_theta), weight.norm_at(x, "A"))


def _b_norm(weight, x):
    return operator_norm(np.asarray(weight.B(x), dtype=float), weight.base_theta, weight.base_theta)


@dataclass
class JointMetric:
    """Weights of ``h(z) = eta1 ||A(x) m|| + eta2 ||B(x)|| + eta3 d_A(x0, x)`` and the joint gains."""

    etas: tuple
    x0: np.ndarray
    weight: FinslerWeight
    joint: JointSystem
    drift: Optional[LyapunovFit]
    K_h: float
    factor: float
    inequalities: dict

    def h(self, z):
        x, m = self.joint.split(z)
        e1, e2, e3 = self.etas[:3]
        return (e1 * _m_norm(self.weight, x, m) + e2 * _b_norm(self.weight, x)
                + e3 * metric_upper(self.weight, np.broadcast_to(self.x0, x.shape), x))

    def H(self, z):
        """Lyapunov-type function ``1 + h`` of the joint chain."""
        return 1.0 + self.h(z)

    def to_dict(self):
        return {"etas": list(self.etas), "K_h": self.K_h, "joint_factor": self.factor,
                "inequalities": self.inequalities,
                "drift": None if self.drift is None else self.drift.to_dict()}


def _joint_points(model, weight, report_region, theta, K_X, K_Theta, count, seed):
    """States ``z = (x, m)`` for the drift fit: region states with random ``m``.

    Entries of ``m`` are uniform on ``[-r, r]`` with ``r`` twice the
    stationary bound ``K_Theta max||B|| / (1 - K_X)`` times ``inv_A_bound``.
    """
    xs, _ = _as_points(model, report_region, theta)
    rng = np.random.default_rng(seed)
    if len(xs) > count:
        xs = xs[rng.choice(len(xs), count, replace=False)]
    bmax = float(np.max(_b_norm(weight, xs)))
    r = 2.0 * K_Theta * bmax * weight.inv_A_bound / (1.0 - K_X)
    r = r if r > 0 else 1.0
    m = rng.uniform(-r, r, (len(xs), model.state_dim, model.param_dim))
    return JointSystem(model).join(xs, m)


def build_joint_metric(report: ContractionReport, b_lip, model, theta, weight: FinslerWeight,
                       region=None, x0=None, n_noise=512, points=64, seed=0):
    """Gains for the joint metric of the state/sensitivity chain.

    ``eta1..eta3`` weight the terms of ``h``. ``eta4`` and ``eta5`` combine
    the state chain (factor ``K_X``) with ``h`` through the drift constant
    ``K_h`` of ``h``, estimated by fitting the drift of ``1 + h`` on joint
    states built from ``region`` (default: the report's region). All strict
    inequalities carry a slack factor of 1.05.
    """
    K_X = report.K_X
    if K_X is None or not K_X < 1.0:
        raise ModelConditionError(f"not contracting: K_X = {K_X}")
    if not report.contraction_ok:
        raise ModelConditionError("contraction certificate failed (K_X + 2 stderr >= 1)")
    if report.K_X2 is None or report.K_XTheta is None:
        raise ModelConditionError("joint metric needs the second-order coefficients")
    K_T, K_X2, K_XT = report.K_Theta, report.K_X2, report.K_XTheta
    eta1 = K_X2 if K_X2 > 0 else 1.0
    base2 = max(K_XT, eta1 * K_T)
    eta2 = SLACK * base2 if base2 > 0 else 1.0
    base3 = eta2 * b_lip * K_X / (1.0 - K_X)
    eta3 = SLACK * base3 if base3 > 0 else 1.0
    ineq = {
        "K_X2 <= eta1": bool(K_X2 <= eta1),
        "max(K_XTheta, eta1 K_Theta) < eta2": bool(base2 < eta2),
        "eta2 B_lip K_X < eta3 (1 - K_X)": bool(eta2 * b_lip * K_X < eta3 * (1.0 - K_X)),
    }
    failed = [k for k, ok in ineq.items() if not ok]
    if failed:
        raise ModelConditionError(f"joint-metric inequality infeasible: {failed[0]}")

    theta = np.asarray(theta, dtype=float).reshape(-1)
    x0 = model.default_x0() if x0 is None else np.asarray(x0, dtype=float)
    joint = JointSystem(model)
    metric = JointMetric((eta1, eta2, eta3), x0, weight, joint, None, 0.0, K_X, ineq)
    linear = K_X2 == 0 and K_XT == 0
    if linear:
        # h does not feed back into the state chain; the joint factor is K_X
        metric.etas = (eta1, eta2, eta3, 0.0, 1.0)
        return metric
    region = region if region is not None else report.metadata.get("region_sampler")
    if region is None:
        raise ValueError("no region to fit the drift of h on")
    zs = _joint_points(model, weight, region, theta, K_X, K_T, points, seed)
    drift = check_lyapunov(joint, theta, metric.H, zs, n_noise=n_noise, p=2, seed=seed)
    if drift.beta > 1.0:
        raise ModelConditionError(f"h drift slope {drift.beta:.4g} exceeds 1")
    K_h = drift.beta + drift.K + max(0.0, drift.max_violation)
    if K_X * K_h == 0:
        eta4 = 1.0
    else:
        eta4 = (1.0 - K_X) / (SLACK * K_X * K_h)
    alpha1 = K_X * (1.0 + eta4 * K_h)
    if not alpha1 < 1.0:
        raise ModelConditionError("joint-metric inequality infeasible: K_X (1 + eta4 K_h) < 1")
    eta5 = eta4 * (1.0 - alpha1) / SLACK
    ineq["K_X (1 + eta4 K_h) < 1"] = True
    ineq["eta5 / eta4 < 1 - K_X (1 + eta4 K_h)"] = bool(eta5 / eta4 < 1.0 - alpha1)
    metric.etas = (eta1, eta2, eta3, eta4, eta5)
    metric.drift = drift
    metric.K_h = K_h
    metric.factor = max(alpha1 + eta5 / eta4, K_X)
    return metric


# --------------------------------------------------------------------------- coupled kernels

@dataclass
class KernelContraction:
    max_ratio: float
    ratios: np.ndarray
    stderrs: np.ndarray
    skipped: int
    p: int
    caveat: str = CHORD_CAVEAT

    def to_dict(self):
        i = int(np.argmax(self.ratios)) if len(self.ratios) else None
        return {"max_ratio": self.max_ratio, "pairs": len(self.ratios), "skipped": self.skipped,
                "max_ratio_stderr": None if i is None else float(self.stderrs[i]),
                "p": self.p, "caveat": self.caveat}


def _pairs(model, pairs, theta, seed):
    if isinstance(pairs, RegionSampler):
        xs, _ = pairs.points(model, theta)
        perm = np.random.default_rng(seed).permutation(len(xs))
        return xs, xs[perm]
    x1, x2 = pairs
    return np.atleast_2d(np.asarray(x1, dtype=float)), np.atleast_2d(np.asarray(x2, dtype=float))


def empirical_kernel_contraction(model, theta, weight: FinslerWeight, pairs, n_noise=256, p=2,
                                 seed=0):
    """Largest coupled one-step contraction ratio over sampled state pairs.

    For each pair the two chains share every noise draw. The ratio is
    ``(E d(f(x1, xi), f(x2, xi))^p)^(1/p) / d(x1, x2)`` with ``d`` the chord
    bound of ``d_A``. ``pairs`` is a sampler (its points against a seeded
    permutation of themselves) or an explicit ``(x1s, x2s)`` tuple. Equal
    pairs are skipped.
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    model.check_theta(theta)
    x1s, x2s = _pairs(model, pairs, theta, seed)
    ratios, ses, skipped = [], [], 0
    for i, (x1, x2) in enumerate(zip(x1s, x2s)):
        d0 = float(metric_upper(weight, x1, x2))
        if not d0 > 0:
            skipped += 1
            continue
        xi = model.sample_noise(RngStream(seed, i).generator, n_noise)
        y1 = model.step(np.broadcast_to(x1, (n_noise, len(x1))), xi, theta)
        y2 = model.step(np.broadcast_to(x2, (n_noise, len(x2))), xi, theta)
        val, se = _power_mean(metric_upper(weight, y1, y2), p)
        ratios.append(val / d0)
        ses.append(se / d0)
    ratios, ses = np.array(ratios), np.array(ses)
    return KernelContraction(float(ratios.max()) if len(ratios) else 0.0, ratios, ses, skipped, p)


# --------------------------------------------------------------------------- parameter Lipschitz

@dataclass
class ParameterLipschitz:
    lhs: float
    rhs: float
    stderr: float
    K_Theta: float
    violated: bool
    transport_w1: Optional[float] = None

    def to_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "stderr": self.stderr, "K_Theta": self.K_Theta,
                "violated": self.violated, "transport_w1": self.transport_w1}


def check_parameter_lipschitz(model, weight: FinslerWeight, theta, dtheta, region, n=None, seed=0,
                              K_Theta=None, n_noise=DEFAULT_NOISE):
    """Compare one-step laws at ``theta`` and ``theta + dtheta`` started from ``mu``.

    ``mu`` is the empirical law of the region's states. The left side is the
    coupled cost ``(mean d(f(x, xi, theta), f(x, xi, theta + dtheta))^2)^(1/2)``
    with shared noise, an upper bound on the order-2 Wasserstein distance.
    The right side is ``K_Theta (mean ||B(x) dtheta||^2)^(1/2)``; ``K_Theta``
    is estimated over the same states when not given. ``violated`` is set when
    ``lhs > rhs + 3 stderr``. ``transport_w1`` is the exact W1 distance between
    the two sample clouds (at most 512 samples), for reference.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    dtheta = np.broadcast_to(np.asarray(dtheta, dtype=float), theta.shape)
    model.check_theta(theta)
    model.check_theta(theta + dtheta)
    xs, _ = _as_points(model, region, theta)
    n = len(xs) if n is None else int(n)
    xs = xs[np.arange(n) % len(xs)]
    xi = model.sample_noise(RngStream(seed, 0).generator, n)
    y0 = model.step(xs, xi, theta)
    y1 = model.step(xs, xi, theta + dtheta)
    d = metric_upper(weight, y0, y1)
    lhs, se = _power_mean(d, 2)
    if K_Theta is None:
        K_Theta = estimate_L(model, weight, xs, "Theta", n_noise=n_noise, seed=seed,
                             theta=theta).sup
    bd = weight.base_theta(np.einsum("...ij,j->...i", np.asarray(weight.B(xs), dtype=float),
                                     dtheta))
    rhs = float(K_Theta * math.sqrt(np.mean(bd**2)))
    se = 0.0 if not math.isfinite(se) else se
    w1 = None
    if n <= 512:
        w1 = wasserstein1_empirical(y0, y1, dist=lambda a, b: metric_upper(weight, a, b))
    return ParameterLipschitz(lhs, rhs, se, float(K_Theta), bool(lhs > rhs + 3 * se), w1)


# --------------------------------------------------------------------------- workflow

def certify(model, weight: FinslerWeight, theta, region: RegionSampler, n_noise=DEFAULT_NOISE,
            seed=0, b_lip=None, lyapunov_points=None, workers=None):
    """Estimate all coefficients, the state drift and, when contracting, the joint gains."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    model.check_theta(theta)
    wanted = COEFFICIENTS if model.has_hessians else ("X", "Theta")
    coeffs = {w: estimate_L(model, weight, region, w, n_noise=n_noise, seed=seed, theta=theta,
                            workers=workers) for w in wanted}
    ok = contraction_flag(coeffs["X"])
    x0 = model.default_x0()

    def V(x):
        x = np.asarray(x, dtype=float)
        return 1.0 + metric_upper(weight, np.broadcast_to(x0, x.shape), x)

    xs, _ = region.points(model, theta)
    if lyapunov_points is not None and len(xs) > lyapunov_points:
        xs = xs[np.linspace(0, len(xs) - 1, lyapunov_points).astype(int)]
    lyap = check_lyapunov(model, theta, V, xs, n_noise=n_noise, p=2, seed=seed)
    meta = {
        "certificate": "empirical",
        "region": region.to_dict(),
        "n_noise": n_noise,
        "points": region.count,
        "seed": seed,
        "theta": theta.tolist(),
        "weight": weight.name,
        "lyapunov_function": "1 + d_A(x0, x)",
        "caveat": CHORD_CAVEAT,
        "region_sampler": region,
    }
    report = ContractionReport(coeffs, ok, lyap, metadata=meta)
    if ok and model.has_hessians:
        try:
            jm = build_joint_metric(report, weight.b_lip if b_lip is None else b_lip, model,
                                    theta, weight, region=region, seed=seed)
            report.etas = list(jm.etas)
            report.joint_factor = jm.factor
            meta["joint_metric"] = jm.to_dict()
        except (ModelConditionError, ValueError) as exc:
            meta["joint_metric_error"] = str(exc)
    return report


def report_document(report: ContractionReport):
    d = report.to_dict()
    d["metadata"] = {k: v for k, v in d["metadata"].items() if k != "region_sampler"}
    jm = d["metadata"].get("joint_metric")
    if jm and jm.get("drift") is None:
        jm.pop("drift")
    return d


__all__ = [
    "RegionSampler", "LEstimate", "estimate_L", "LyapunovFit", "check_lyapunov",
    "Interconnection", "check_interconnection", "ContractionReport", "contraction_flag",
    "JointMetric", "build_joint_metric", "KernelContraction", "empirical_kernel_contraction",
    "ParameterLipschitz", "check_parameter_lipschitz", "certify", "report_document",
]
