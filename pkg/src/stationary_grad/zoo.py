"""Bundled models with their weight pairings and parameter-region checks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ModelConditionError, ParameterRegionError
from .finsler import BaseNorm, FinslerWeight
from .kernels import linear_recursion
from .model import Box, SystemModel


def _batch(*arrays_and_core):
    shapes = [np.shape(a)[: np.ndim(a) - core] for a, core in arrays_and_core]
    return np.broadcast_shapes(*shapes)


def sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


# --------------------------------------------------------------------------- AR(1)


@dataclass(frozen=True)
class LinearAR1Config:
    a: float = 0.5
    eps: float = 0.1
    noise: str = "gaussian"

    def __post_init__(self):
        if not abs(self.a) < 1:
            raise ModelConditionError(f"AR(1) needs |a| < 1, got a={self.a}")
        if self.eps < 0:
            raise ModelConditionError(f"AR(1) needs eps >= 0, got eps={self.eps}")
        if self.noise not in ("gaussian", "uniform"):
            raise ModelConditionError(f"unknown AR(1) noise {self.noise!r}")


class LinearAR1(SystemModel):
    """``x' = a x + theta + eps xi`` with unit-variance noise."""

    name = "ar1"
    state_dim = 1
    param_dim = 1
    noise_shape = ()

    def __init__(self, cfg: LinearAR1Config):
        self.cfg = cfg
        self.a = float(cfg.a)
        self.eps = float(cfg.eps)

    def step(self, x, xi, theta):
        # grouped like the compiled recursion in advance, so both agree bit for bit
        return self.a * np.asarray(x) + (np.asarray(theta) + self.eps * np.asarray(xi)[..., None])

    def advance(self, x, theta, xi_block):
        x = np.asarray(x, dtype=float)
        drive = np.asarray(theta) + self.eps * np.asarray(xi_block)[..., None]
        drive = np.broadcast_to(drive, drive.shape[:1] + x.shape)
        B = int(np.prod(x.shape[:-1], dtype=int))
        L = len(drive)
        states = linear_recursion(np.full((L, B, 1, 1), self.a), drive.reshape(L, B, 1, 1),
                                  x.reshape(B, 1, 1))
        return states.reshape(drive.shape)

    def jac_x(self, x, xi, theta):
        shape = _batch((x, 1), (xi, 0), (theta, 1))
        return np.full(shape + (1, 1), self.a)

    def jac_theta(self, x, xi, theta):
        shape = _batch((x, 1), (xi, 0), (theta, 1))
        return np.ones(shape + (1, 1))

    def hess_xx(self, x, xi, theta):
        return np.zeros(_batch((x, 1), (xi, 0), (theta, 1)) + (1, 1, 1))

    hess_thetatheta = hess_xx
    hess_xtheta = hess_xx

    def linearize(self, x, xi, theta):
        fx = self.step(x, xi, theta)
        shape = fx.shape[:-1]
        return fx, np.full(shape + (1, 1), self.a), np.ones(shape + (1, 1))

    def sample_noise(self, rng, size):
        if self.cfg.noise == "gaussian":
            return rng.standard_normal(size)
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size)

    def stationary_mean(self, theta):
        return float(np.asarray(theta).reshape(-1)[0]) / (1 - self.a)

    def stationary_second_moment(self, theta):
        th = float(np.asarray(theta).reshape(-1)[0])
        return th**2 / (1 - self.a) ** 2 + self.eps**2 / (1 - self.a**2)


def make_ar1(cfg: Optional[LinearAR1Config] = None):
    cfg = cfg or LinearAR1Config()
    model = LinearAR1(cfg)
    weight = FinslerWeight.identity(1, 1, BaseNorm.linf(), BaseNorm.linf(), name="ar1-identity")
    return model, weight


# ------------------------------------------------------------- stochastic network


@dataclass(frozen=True)
class StochasticNNConfig:
    """Randomly thinned sigmoid network on ``N`` nodes.

    ``edges`` lists ``(i, j)`` pairs, meaning node ``j`` feeds node ``i``;
    ``None`` is the complete graph including self loops. ``theta`` is the
    ``N x N`` weight matrix; biases are fixed and not differentiated.
    """

    N: int = 3
    rho: float = 0.5
    theta: Optional[tuple] = None
    edges: Optional[tuple] = None
    biases: Optional[tuple] = None

    def edge_mask(self):
        mask = np.zeros((self.N, self.N), dtype=bool)
        if self.edges is None:
            mask[:] = True
        else:
            for i, j in self.edges:
                mask[int(i), int(j)] = True
        return mask

    def theta_matrix(self):
        if self.theta is None:
            return np.zeros((self.N, self.N))
        return np.asarray(self.theta, dtype=float).reshape(self.N, self.N)

    def bias_vector(self):
        return np.zeros(self.N) if self.biases is None else np.asarray(self.biases, dtype=float)

    def to_dict(self):
        d = asdict(self)
        for k in ("theta", "edges", "biases"):
            if d[k] is not None:
                d[k] = np.asarray(d[k]).tolist()
        return d


class StochasticNN(SystemModel):
    """``x_i' = sigma(sum_k xi_ik theta_ik x_k + b_i)`` with Bernoulli edge gates.

    Each edge is active independently with probability ``1 - rho``. The
    parameter vector is the row-major flattening of the weight matrix.
    """

    name = "stochastic_nn"

    def __init__(self, cfg: StochasticNNConfig):
        if cfg.N < 1:
            raise ModelConditionError("network needs N >= 1")
        if not 0.0 <= cfg.rho <= 1.0:
            raise ModelConditionError(f"edge drop probability must lie in [0, 1], got {cfg.rho}")
        self.cfg = cfg
        self.N = int(cfg.N)
        self.state_dim = self.N
        self.param_dim = self.N * self.N
        self.noise_shape = (self.N, self.N)
        self.state_domain = Box(np.zeros(self.N), np.ones(self.N))
        self.mask = cfg.edge_mask()
        self.n_edges = int(self.mask.sum())
        self.rho = float(cfg.rho)
        self.bias = cfg.bias_vector()
        self._eye = np.eye(self.N)
        self.check_theta(cfg.theta_matrix().reshape(-1))

    def contraction_number(self, theta):
        """``||theta||_inf (1 - rho^|E|)^(1/2)``; must stay below 4."""
        th = np.asarray(theta, dtype=float).reshape(self.N, self.N) * self.mask
        row_sum = np.abs(th).sum(axis=1).max()
        return float(row_sum * math.sqrt(1.0 - self.rho**self.n_edges))

    def kx_bound(self, theta):
        """Closed-form bound ``(1/4) ||theta||_inf (1 - rho^|E|)^(1/2)`` on L_X."""
        return 0.25 * self.contraction_number(theta)

    def check_theta(self, theta):
        c = self.contraction_number(theta)
        if not c < 4.0:
            raise ParameterRegionError(
                f"contraction bound violated: ||theta||_inf * (1 - rho^|E|)^(1/2) = {c:.6g} >= 4")

    def default_x0(self):
        return np.full(self.N, 0.5)

    def _parts(self, x, xi, theta):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        th = np.asarray(theta, dtype=float)
        th = th.reshape(th.shape[:-1] + (self.N, self.N))
        W = xi * th
        u = np.matmul(W, x[..., None])[..., 0] + self.bias
        s = sigmoid(u)
        return x, xi, W, s

    def step(self, x, xi, theta):
        return self._parts(x, xi, theta)[3]

    def jac_x(self, x, xi, theta):
        _, _, W, s = self._parts(x, xi, theta)
        return (s * (1 - s))[..., :, None] * W

    def _jac_theta(self, x, xi, s):
        ds = s * (1 - s)
        gx = ds[..., :, None] * xi * x[..., None, :]          # [i, k] = s'(u_i) xi_ik x_k
        J = self._eye[:, :, None] * gx[..., :, None, :]        # [i, j, k] = delta_ij gx[i, k]
        return J.reshape(J.shape[:-2] + (self.param_dim,))

    def jac_theta(self, x, xi, theta):
        x, xi, _, s = self._parts(x, xi, theta)
        return self._jac_theta(np.broadcast_to(x, s.shape), xi, s)

    def linearize(self, x, xi, theta):
        x, xi, W, s = self._parts(x, xi, theta)
        jx = (s * (1 - s))[..., :, None] * W
        return s, jx, self._jac_theta(np.broadcast_to(x, s.shape), xi, s)

    def _second(self, s):
        return s * (1 - s) * (1 - 2 * s)

    def hess_xx(self, x, xi, theta):
        _, _, W, s = self._parts(x, xi, theta)
        return self._second(s)[..., :, None, None] * W[..., :, :, None] * W[..., :, None, :]

    def hess_thetatheta(self, x, xi, theta):
        x, xi, _, s = self._parts(x, xi, theta)
        N = self.N
        g = xi * np.broadcast_to(x, s.shape)[..., None, :]                  # [i, k] = xi_ik x_k
        inner = self._second(s)[..., :, None, None] * g[..., :, :, None] * g[..., :, None, :]
        H = np.einsum("...ikm,ij,il->...ijklm", inner, self._eye, self._eye)
        return H.reshape(s.shape[:-1] + (N, self.param_dim, self.param_dim))

    def hess_xtheta(self, x, xi, theta):
        x, xi, W, s = self._parts(x, xi, theta)
        N = self.N
        xb = np.broadcast_to(x, s.shape)
        ds = s * (1 - s)
        # [i, j, m] = s''(u_i) W_ij xi_im x_m + s'(u_i) xi_ij delta_jm
        inner = self._second(s)[..., :, None, None] * W[..., :, :, None] * (xi * xb[..., None, :])[..., :, None, :]
        inner = inner + ds[..., :, None, None] * xi[..., :, :, None] * self._eye
        H = np.einsum("...ijm,il->...ijlm", inner, self._eye)
        return H.reshape(s.shape[:-1] + (N, N, self.param_dim))

    def sample_noise(self, rng, size):
        active = rng.random((size, self.N, self.N)) < (1.0 - self.rho)
        return (active & self.mask).astype(float)


def make_stochastic_nn(cfg: Optional[StochasticNNConfig] = None):
    cfg = cfg or StochasticNNConfig()
    model = StochasticNN(cfg)
    weight = FinslerWeight.identity(model.N, model.param_dim, BaseNorm.linf(), BaseNorm.linf(),
                                    name="nn-identity")
    return model, weight


def random_nn_theta(N, bound=0.3, seed=0):
    """Weight matrix with entries uniform in ``[-bound, bound]``."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(N, N))


# ------------------------------------------------------------ two-dimensional system

THETA_HALF_WIDTH_EX2 = 0.25 * math.log(2.0)


@dataclass(frozen=True)
class Example2Config:
    """``f1 = x1/2 + theta + eps xi1``, ``f2 = x1 x2 / 2 + eps xi2``.

    ``xi1`` is uniform on ``[-1/2, 1/2]`` or standard normal; ``xi2`` standard
    normal or uniform on ``[-1/2, 1/2]``. ``p1, p2`` weight the state norm
    ``p1 |u| + p2 |v|``.
    """

    eps: float = 0.05
    p1: float = 1.0
    p2: float = 0.1
    xi1: str = "uniform"
    xi2: str = "gaussian"
    mc_samples: int = 200_000
    mc_seed: int = 20240601


def _example2_noise(cfg, rng, size):
    if cfg.xi1 == "uniform":
        a = rng.uniform(-0.5, 0.5, size)
    else:
        a = rng.standard_normal(size)
    if cfg.xi2 == "gaussian":
        b = rng.standard_normal(size)
    else:
        b = rng.uniform(-0.5, 0.5, size)
    return np.stack([a, b], axis=-1)


def example2_moments(cfg: Example2Config):
    """Monte Carlo ``Q = (E xi2^2)^(1/2)`` and ``R = (E exp(4 eps |xi1|))^(1/2)``."""
    rng = np.random.default_rng(cfg.mc_seed)
    xi = _example2_noise(cfg, rng, cfg.mc_samples)
    Q = float(np.sqrt(np.mean(xi[:, 1] ** 2)))
    R = float(np.sqrt(np.mean(np.exp(4.0 * cfg.eps * np.abs(xi[:, 0])))))
    return Q, R


def check_example2_conditions(cfg: Example2Config):
    """Validate the applicability conditions; return the estimated ``(Q, R)``."""
    if cfg.xi1 not in ("uniform", "gaussian") or cfg.xi2 not in ("uniform", "gaussian"):
        raise ModelConditionError("xi1/xi2 must be 'uniform' or 'gaussian'")
    if not (0.0 <= cfg.eps < 1.0):
        raise ModelConditionError(f"noise scale condition violated: need 0 <= eps < 1, got {cfg.eps}")
    if not (cfg.p1 > 0 and cfg.p2 > 0):
        raise ModelConditionError("metric weights p1, p2 must be positive")
    if not 1.0 + cfg.p2 / cfg.p1 < 2.0**0.25:
        raise ModelConditionError(
            f"metric weight condition violated: 1 + p2/p1 = {1 + cfg.p2 / cfg.p1:.6g} >= 2^(1/4)")
    Q, R = example2_moments(cfg)
    lhs = (1.0 + cfg.eps * Q) * R
    if not lhs < 2.0**0.25:
        raise ModelConditionError(
            f"noise moment condition violated: (1 + eps*Q) * R = {lhs:.6g} >= 2^(1/4)")
    return Q, R


class Example2Model(SystemModel):
    name = "example2"
    state_dim = 2
    param_dim = 1
    noise_shape = (2,)

    def __init__(self, cfg: Example2Config):
        self.cfg = cfg
        self.eps = float(cfg.eps)
        self.Q, self.R = check_example2_conditions(cfg)

    def check_theta(self, theta):
        th = float(np.asarray(theta, dtype=float).reshape(-1)[0])
        if not abs(th) < THETA_HALF_WIDTH_EX2:
            raise ParameterRegionError(
                f"theta={th:.6g} outside the parameter interval (-log(2)/4, log(2)/4)")

    def step(self, x, xi, theta):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        th = np.asarray(theta, dtype=float)[..., 0]
        f1 = 0.5 * x[..., 0] + th + self.eps * xi[..., 0]
        f2 = 0.5 * x[..., 0] * x[..., 1] + self.eps * xi[..., 1]
        return np.stack(np.broadcast_arrays(f1, f2), axis=-1)

    def jac_x(self, x, xi, theta):
        x = np.asarray(x, dtype=float)
        shape = _batch((x, 1), (xi, 1), (theta, 1))
        J = np.zeros(shape + (2, 2))
        xb = np.broadcast_to(x, shape + (2,))
        J[..., 0, 0] = 0.5
        J[..., 1, 0] = 0.5 * xb[..., 1]
        J[..., 1, 1] = 0.5 * xb[..., 0]
        return J

    def jac_theta(self, x, xi, theta):
        shape = _batch((x, 1), (xi, 1), (theta, 1))
        J = np.zeros(shape + (2, 1))
        J[..., 0, 0] = 1.0
        return J

    def hess_xx(self, x, xi, theta):
        shape = _batch((x, 1), (xi, 1), (theta, 1))
        H = np.zeros(shape + (2, 2, 2))
        H[..., 1, 0, 1] = 0.5
        H[..., 1, 1, 0] = 0.5
        return H

    def hess_thetatheta(self, x, xi, theta):
        return np.zeros(_batch((x, 1), (xi, 1), (theta, 1)) + (2, 1, 1))

    def hess_xtheta(self, x, xi, theta):
        return np.zeros(_batch((x, 1), (xi, 1), (theta, 1)) + (2, 2, 1))

    def sample_noise(self, rng, size):
        return _example2_noise(self.cfg, rng, size)


def example2_g(x):
    """``(g1, g2) = (exp(2|x1|)(1 + |x2|), exp(2|x1|))``."""
    x = np.asarray(x, dtype=float)
    e = np.exp(2.0 * np.abs(x[..., 0]))
    return e * (1.0 + np.abs(x[..., 1])), e


def _example2_A(x):
    g1, g2 = example2_g(x)
    A = np.zeros(np.shape(g1) + (2, 2))
    A[..., 0, 0] = g1
    A[..., 1, 1] = g2
    return A


def _example2_B(x):
    g1, _ = example2_g(x)
    return np.asarray(g1)[..., None, None]


def make_example2(cfg: Optional[Example2Config] = None):
    cfg = cfg or Example2Config()
    model = Example2Model(cfg)
    weight = FinslerWeight(
        A=_example2_A,
        B=_example2_B,
        base_x=BaseNorm.l1([cfg.p1, cfg.p2]),
        base_theta=BaseNorm.l1([1.0]),
        inv_A_bound=1.0,
        b_lip=max(2.0 / cfg.p1, 1.0 / cfg.p2),
        name="example2-exponential",
    )
    return model, weight


MODEL_KINDS = {
    "ar1": (LinearAR1Config, make_ar1),
    "stochastic_nn": (StochasticNNConfig, make_stochastic_nn),
    "example2": (Example2Config, make_example2),
}


def build_model(kind, **fields):
    """Construct ``(model, weight)`` from a model kind and config fields."""
    try:
        cfg_cls, maker = MODEL_KINDS[kind]
    except KeyError:
        raise ModelConditionError(f"unknown model kind {kind!r}; known: {sorted(MODEL_KINDS)}") from None
    if cfg_cls is StochasticNNConfig:
        for key in ("theta", "edges", "biases"):
            if fields.get(key) is not None:
                fields[key] = tuple(map(tuple, np.atleast_2d(fields[key]).tolist())) \
                    if key != "biases" else tuple(np.asarray(fields[key], dtype=float).tolist())
    return maker(cfg_cls(**fields))
