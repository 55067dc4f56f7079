"""Evaluable velocity fields and endpoint couplings.

A field is anything callable as ``field(x, t) -> drift`` with ``x`` of shape
(n, D) and ``t`` a scalar (or per-point array where noted). Analytic fields
additionally expose ``exact_solution(x, t0, t1)`` — the closed-form flow map
used as a truncation-error oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, DataError, NumericError


class VectorField:
    """Base class; subclasses implement __call__(x, t)."""

    dim: int | None = None

    def __call__(self, x, t):
        raise NotImplementedError


class MlpField(VectorField):
    """A learned field backed by MLP parameters (usually the EMA shadow)."""

    def __init__(self, params: nn.MlpParams):
        self.params = params
        self.dim = params.data_dim

    def __call__(self, x, t):
        return nn.forward(self.params, x, t)


class GaussianOracleField(VectorField):
    """Exact marginal velocity of the linear interpolant between two
    isotropic Gaussians with independent endpoints.

    With x_t = (1-t) x0 + t x1, x0 ~ N(mu0, s0^2 I), x1 ~ N(mu1, s1^2 I):

        u(x, t) = (mu1 - mu0) + [t s1^2 - (1-t) s0^2] / s_t^2 * (x - m_t)

    where m_t = (1-t) mu0 + t mu1 and s_t^2 = (1-t)^2 s0^2 + t^2 s1^2.
    The flow map of this field is affine, so the closed-form solution is
    available for solver oracles.
    """

    def __init__(self, mean0, sigma0, mean1, sigma1, dim=1):
        if sigma0 <= 0 or sigma1 <= 0:
            raise ConfigError("Gaussian oracle covariance must be positive definite (sigma > 0)")
        self.mu0 = np.broadcast_to(np.asarray(mean0, dtype=np.float64), (dim,)).copy()
        self.mu1 = np.broadcast_to(np.asarray(mean1, dtype=np.float64), (dim,)).copy()
        self.s0 = float(sigma0)
        self.s1 = float(sigma1)
        self.dim = dim

    def _moments(self, t):
        t = np.asarray(t, dtype=np.float64)
        m = np.multiply.outer(1.0 - t, self.mu0) + np.multiply.outer(t, self.mu1)
        var = (1.0 - t) ** 2 * self.s0**2 + t**2 * self.s1**2
        return m, var

    def __call__(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        m, var = self._moments(t)
        coef = (np.asarray(t) * self.s1**2 - (1.0 - np.asarray(t)) * self.s0**2) / var
        return (self.mu1 - self.mu0) + np.multiply.outer(coef, np.ones(self.dim)) * (x - m)

    def exact_solution(self, x, t0, t1):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        m0, v0 = self._moments(t0)
        m1, v1 = self._moments(t1)
        return m1 + np.sqrt(v1 / v0) * (x - m0)


class ConditionalStraightField(VectorField):
    """Constant velocity x1 - x0 of a single conditional straight path."""

    def __init__(self, x0, x1):
        self.x0 = np.asarray(x0, dtype=np.float64).ravel()
        self.x1 = np.asarray(x1, dtype=np.float64).ravel()
        if self.x0.shape != self.x1.shape:
            raise ValueError("x0/x1 dimensions differ")
        self.dim = self.x0.size

    def __call__(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.broadcast_to(self.x1 - self.x0, x.shape).copy()

    def exact_solution(self, x, t0, t1):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return x + (t1 - t0) * (self.x1 - self.x0)


class ConstantField(VectorField):
    """dx/dt = c."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64).ravel()
        self.dim = self.c.size

    def __call__(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.broadcast_to(self.c, x.shape).copy()

    def exact_solution(self, x, t0, t1):
        return np.atleast_2d(np.asarray(x, dtype=np.float64)) + (t1 - t0) * self.c


class ExponentialField(VectorField):
    """dx/dt = lam * x, any dimension; Lipschitz constant |lam|."""

    def __init__(self, lam, dim=1):
        self.lam = float(lam)
        self.dim = dim

    @property
    def lipschitz_const(self):
        return abs(self.lam)

    def __call__(self, x, t):
        return self.lam * np.atleast_2d(np.asarray(x, dtype=np.float64))

    def exact_solution(self, x, t0, t1):
        return np.atleast_2d(np.asarray(x, dtype=np.float64)) * np.exp(self.lam * (t1 - t0))


class MatrixField(VectorField):
    """dx/dt = A x for a constant matrix A (row-vector batch convention)."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ConfigError("MatrixField needs a square matrix")
        self.dim = self.a.shape[0]

    def __call__(self, x, t):
        return np.atleast_2d(np.asarray(x, dtype=np.float64)) @ self.a.T

    def exact_solution(self, x, t0, t1):
        from scipy.linalg import expm

        return np.atleast_2d(np.asarray(x, dtype=np.float64)) @ expm(self.a * (t1 - t0)).T


class RotationField(MatrixField):
    """Planar rotation field dx/dt = omega * (-x2, x1)."""

    def __init__(self, omega=1.0):
        self.omega = float(omega)
        super().__init__([[0.0, -self.omega], [self.omega, 0.0]])

    def exact_solution(self, x, t0, t1):
        ang = self.omega * (t1 - t0)
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        return np.atleast_2d(np.asarray(x, dtype=np.float64)) @ rot.T


def conditional_ot_field(x_t, t, x1, sigma_min):
    """Conditional velocity of the Gaussian path N(t x1, (1-(1-s)t)^2 I).

    u(x, t | x1) = (x1 - (1-s) x) / (1 - (1-s) t); its flow transports
    N(0, I) at t=0 to N(x1, s^2 I) at t=1, and on the interpolant it tends
    to x1 - x0 as s -> 0.
    """
    if sigma_min < 0:
        raise ConfigError("sigma_min must be >= 0")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    x1 = np.broadcast_to(np.asarray(x1, dtype=np.float64), x_t.shape)
    t = np.asarray(t, dtype=np.float64)
    denom = 1.0 - (1.0 - sigma_min) * t
    if np.any(denom <= 0.0):
        raise NumericError(f"conditional OT field undefined: denominator {denom} <= 0")
    if t.ndim > 0:
        denom = denom[:, None]
    return (x1 - (1.0 - sigma_min) * x_t) / denom


@dataclass
class InterpolantBatch:
    """One draw from a coupling, interpolated to time(s) t."""

    x0: np.ndarray
    x1: np.ndarray
    xt: np.ndarray
    t: np.ndarray
    target: np.ndarray  # velocity regression target at (xt, t)


class IndependentCoupling:
    """Product coupling pi0 x pi1 over two samplers with .sample(n, rng)."""

    def __init__(self, source, target):
        self.source = source
        self.target = target

    def draw(self, n, rng):
        return self.source.sample(n, rng), self.target.sample(n, rng)

    def sample_interpolant(self, n, t, rng) -> InterpolantBatch:
        if n < 1:
            raise ConfigError("need n >= 1 interpolant samples")
        x0, x1 = self.draw(n, rng)
        t = np.asarray(t, dtype=np.float64)
        tv = np.full(n, float(t)) if t.ndim == 0 else t
        if tv.shape != (n,):
            raise ValueError(f"t must be scalar or shape ({n},)")
        xt = (1.0 - tv)[:, None] * x0 + tv[:, None] * x1
        return InterpolantBatch(x0, x1, xt, tv, x1 - x0)


class JointCoupling:
    """Solver-generated joint coupling backed by a reflow pair dataset.

    Pairs live on time segments; interpolation at a time t draws uniformly
    from the records of the segment containing t and interpolates between
    the pair endpoints, with the segment's constant slope as target. For a
    single-segment dataset this reduces to x_t = (1-t) x0 + t x1.
    """

    def __init__(self, pairs):
        if pairs.n_records == 0:
            raise DataError("joint coupling needs a non-empty pair dataset")
        self.pairs = pairs

    def sample_interpolant(self, n, t, rng) -> InterpolantBatch:
        if n < 1:
            raise ConfigError("need n >= 1 interpolant samples")
        t = float(t)
        b = self.pairs.boundaries
        k = int(np.clip(np.searchsorted(b, t, side="right") - 1, 0, len(b) - 2))
        sel = np.flatnonzero(self.pairs.segment == k)
        if sel.size == 0:
            raise DataError(f"no pairs stored for segment {k} (t={t})")
        idx = sel[rng.integers(0, sel.size, size=n)]
        x_src = self.pairs.x_src[idx]
        x_dst = self.pairs.x_dst[idx]
        t_src, t_dst = b[k], b[k + 1]
        r = (t - t_src) / (t_dst - t_src)
        xt = (1.0 - r) * x_src + r * x_dst
        target = (x_dst - x_src) / (t_dst - t_src)
        return InterpolantBatch(x_src, x_dst, xt, np.full(n, t), target)


def sample_interpolant(coupling, n, t, rng) -> InterpolantBatch:
    """Draw endpoint pairs per the coupling and interpolate to time t."""
    return coupling.sample_interpolant(n, t, rng)


def field_from_spec(spec: dict) -> VectorField:
    """Build a field from a config mapping (the run-config `field` section)."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("field spec must be a mapping with a 'kind' key")
    kind = spec["kind"]
    if kind == "learned":
        from .data import load_checkpoint

        ckpt = load_checkpoint(spec["checkpoint"])
        params = ckpt.ema.shadow if (spec.get("use_ema", True) and ckpt.ema is not None) else ckpt.params
        return MlpField(params)
    if kind == "gaussian_oracle":
        return GaussianOracleField(
            spec.get("mean0", 0.0), spec.get("sigma0", 1.0),
            spec.get("mean1", 0.0), spec.get("sigma1", 1.0),
            dim=spec.get("dim", 1),
        )
    if kind == "conditional_straight":
        return ConditionalStraightField(spec["x0"], spec["x1"])
    if kind == "exponential":
        return ExponentialField(spec.get("lam", 1.0), dim=spec.get("dim", 1))
    if kind == "rotation":
        return RotationField(spec.get("omega", 1.0))
    if kind == "constant":
        return ConstantField(spec["c"])
    raise ConfigError(f"unknown field kind {kind!r}")
