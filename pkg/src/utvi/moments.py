"""Gaussian moment algebra and the one-dimensional unscented transform.

Activations are carried as factorized Normals: an elementwise (mean, variance)
pair.  Affine maps and products of independent variables have exact moment
rules; everything else goes through three deterministic sigma points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .errors import DomainError, ParameterError, PropagationError, ShapeError

DEFAULT_KAPPA = 2.0
SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianTensor:
    """Elementwise mean/variance of a factorized Normal activation."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        var = np.array(self.variance, dtype=np.float64)
        if mean.shape != var.shape:
            raise ShapeError(f"mean shape {mean.shape} != variance shape {var.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise DomainError("GaussianTensor entries must be finite")
        if np.any(var < 0):
            raise DomainError("variance entries must be >= 0")
        mean.flags.writeable = False
        var.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def shape(self):
        return self.mean.shape

    @property
    def std(self):
        return np.sqrt(self.variance)

    @classmethod
    def deterministic(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.zeros_like(values))

    def __len__(self):
        return len(self.mean)

    def __getitem__(self, idx):
        return GaussianTensor(self.mean[idx], self.variance[idx])


@dataclass(frozen=True)
class SigmaPointSet:
    points: tuple
    weights: tuple
    kappa: float

    def moments(self):
        """Mean and variance reconstructed from the points and weights."""
        pts = np.asarray(self.points)
        w = np.asarray(self.weights)
        mu = float(w @ pts)
        return mu, float(w @ (pts - mu) ** 2)


def _broadcast(*arrays):
    try:
        return np.broadcast_arrays(*arrays)
    except ValueError as exc:
        shapes = [np.shape(a) for a in arrays]
        raise ShapeError(f"incompatible shapes {shapes}") from exc


def affine_propagate(x: GaussianTensor, a, b) -> GaussianTensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mean, var, a, b = _broadcast(x.mean, x.variance, a, b)
    return GaussianTensor(a * mean + b, a * a * var)


def independent_product_moments(x: GaussianTensor, y: GaussianTensor) -> GaussianTensor:
    """Moments of X*Y for independent X and Y."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    mx, vx, my, vy = x.mean, x.variance, y.mean, y.variance
    return GaussianTensor(mx * my, vx * vy + vx * my**2 + mx**2 * vy)


def sigma_weights(kappa: float = DEFAULT_KAPPA):
    """Weights (center, lower, upper) and the spread factor sqrt(kappa + 1)."""
    if not kappa > 0:
        raise ParameterError(f"kappa must be > 0, got {kappa}")
    w0 = kappa / (kappa + 1.0)
    w1 = 1.0 / (2.0 * (kappa + 1.0))
    return np.array([w0, w1, w1]), math.sqrt(kappa + 1.0)


def make_sigma_points(mu: float, sigma2: float, kappa: float = DEFAULT_KAPPA) -> SigmaPointSet:
    weights, spread = sigma_weights(kappa)
    if sigma2 < 0:
        raise DomainError(f"sigma2 must be >= 0, got {sigma2}")
    s = math.sqrt(sigma2) * spread
    return SigmaPointSet((mu, mu - s, mu + s), tuple(weights), float(kappa))


def sigma_point_grid(x: GaussianTensor, kappa: float = DEFAULT_KAPPA):
    """Stack the three sigma points of every element along a new last axis."""
    weights, spread = sigma_weights(kappa)
    s = np.sqrt(x.variance) * spread
    pts = np.stack([x.mean, x.mean - s, x.mean + s], axis=-1)
    return pts, weights


def ut_propagate(x: GaussianTensor, f: Callable, kappa: float = DEFAULT_KAPPA) -> GaussianTensor:
    """Push each element of ``x`` through ``f`` with a 1-D unscented transform.

    ``f`` is treated as a black box applied elementwise; it is called once on
    an array holding all sigma points.  When an element has zero variance its
    three points coincide and the output is ``(f(mean), 0)``.
    """
    pts, w = sigma_point_grid(x, kappa)
    fx = np.asarray(f(pts), dtype=np.float64)
    if fx.shape != pts.shape:
        raise ShapeError(f"f must be elementwise: got shape {fx.shape} for input {pts.shape}")
    bad = ~np.isfinite(fx)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0][:-1])
        raise PropagationError(f"non-finite f value at element {idx}")
    mean = fx @ w
    var = (fx - mean[..., None]) ** 2 @ w
    return GaussianTensor(mean, var)


def normal_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-0.5 * z * z) / SQRT_2PI


def normal_cdf(z):
    return special.ndtr(np.asarray(z, dtype=np.float64))


# Rational approximation for the central and tail regions of the inverse CDF
# (relative error ~1e-9 before refinement).
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _lower_half_inv(q):
    """Inverse CDF for q in (0, 0.5]; result <= 0."""
    out = np.empty_like(q)
    tail = q < _P_LOW
    qt = q[tail]
    t = np.sqrt(-2.0 * np.log(qt))
    out[tail] = (((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]) / (
        (((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0)
    qc = q[~tail] - 0.5
    r = qc * qc
    out[~tail] = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * qc / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    # two Halley steps on Phi(x) - q; q is exact here so the tail keeps full precision
    for _ in range(2):
        e = special.ndtr(out) - q
        u = e * SQRT_2PI * np.exp(0.5 * out * out)
        out = out - u / (1.0 + 0.5 * out * u)
    return out


def normal_inv_cdf(p):
    """Quantile function of the standard Normal on the open interval (0, 1).

    Callers working with saturating inputs should clamp to ``[eps, 1 - eps]``
    first; the endpoints themselves raise :class:`DomainError`.
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.all((p > 0) & (p < 1)):
        raise DomainError("normal_inv_cdf requires p strictly inside (0, 1)")
    scalar = p.ndim == 0
    p = np.atleast_1d(p)
    upper = p > 0.5
    # 1 - p is exact for p >= 0.5
    q = np.where(upper, 1.0 - p, p)
    z = _lower_half_inv(q)
    z = np.where(upper, -z, z)
    return z[0] if scalar else z
