"""Bayesian layers and moment propagation through network nonlinearities.

Only affine layers (linear, convolution) carry weight distributions; they are
propagated with the exact rules for sums of products of independent Normals.
Nonlinear layers are deterministic and are propagated in one of three modes:

* ``smp``  - closed-form moments where they exist (leaky-ReLU);
* ``utvi`` - three sigma points per element;
* ``mcvi`` - ``n`` fresh Monte Carlo draws per element and layer, with the
  unbiased sample variance.

Everything here operates on :mod:`utvi.autodiff` nodes so the same code
serves training and inference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .datagen import SimParams
from .errors import ParameterError, PropagationError, ShapeError
from .moments import DEFAULT_KAPPA, GaussianTensor, sigma_weights

DEFAULT_SLOPE = 0.01
PROB_CLAMP = 1e-7
INIT_SIGMA = 0.01


class Moments(NamedTuple):
    """(mean, variance) pair of autodiff nodes."""

    mean: ad.Node
    var: ad.Node

    @classmethod
    def of(cls, x):
        if isinstance(x, Moments):
            return x
        if isinstance(x, GaussianTensor):
            return cls(ad.constant(x.mean), ad.constant(x.variance))
        x = np.asarray(x, dtype=np.float64)
        return cls(ad.constant(x), ad.constant(np.zeros_like(x)))

    def to_tensor(self):
        return GaussianTensor(ad.value_of(self.mean), np.maximum(ad.value_of(self.var), 0.0))


@dataclass(frozen=True)
class PropagationMode:
    kind: str = "utvi"
    kappa: float = DEFAULT_KAPPA
    samples: int = 3
    rng: np.random.Generator | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("smp", "utvi", "mcvi"):
            raise ParameterError(f"unknown propagation mode {self.kind!r}")
        if not self.kappa > 0:
            raise ParameterError("kappa must be > 0")
        if self.kind == "mcvi":
            if self.samples < 2:
                raise ParameterError("MCVI needs at least 2 samples for an unbiased variance")
            if self.rng is None:
                raise ParameterError("MCVI needs an rng stream")

    @classmethod
    def smp(cls):
        return cls("smp")

    @classmethod
    def utvi(cls, kappa=DEFAULT_KAPPA):
        return cls("utvi", kappa=kappa)

    @classmethod
    def mcvi(cls, samples, rng):
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        return cls("mcvi", samples=samples, rng=rng)

    def with_rng(self, rng):
        return PropagationMode(self.kind, self.kappa, self.samples, rng)

    @property
    def label(self):
        return f"mcvi@{self.samples}" if self.kind == "mcvi" else self.kind


def softplus_inv(s):
    return math.log(math.expm1(s))


# -- generic elementwise propagation -----------------------------------------

def ut_nodes(x: Moments, f, kappa=DEFAULT_KAPPA) -> Moments:
    """Unscented transform of every element; differentiable in (mean, var)."""
    w, spread = sigma_weights(kappa)
    s = ad.sqrt(x.var * (spread * spread))
    pts = ad.stack([x.mean, x.mean - s, x.mean + s], axis=-1)
    fx = f(pts)
    mean = ad.sum(fx * w, axis=-1)
    dev = fx - ad.expand_last(mean)
    var = ad.sum(ad.square(dev) * w, axis=-1)
    return Moments(mean, var)


def mc_nodes(x: Moments, f, n, rng) -> Moments:
    """Sample-mean / unbiased-variance estimate from ``n`` reparameterized draws."""
    if n < 2:
        raise ParameterError("MCVI needs at least 2 samples")
    eps = rng.standard_normal(x.mean.shape + (n,))
    std = ad.sqrt(x.var)
    pts = ad.expand_last(x.mean) + ad.expand_last(std) * eps
    fx = f(pts)
    mean = ad.mean(fx, axis=-1)
    dev = fx - ad.expand_last(mean)
    var = ad.sum(ad.square(dev), axis=-1) / float(n - 1)
    return Moments(mean, var)


def fused_moments(x: Moments, f, fprime, mode: PropagationMode) -> Moments:
    """UT or MC propagation for an ``f`` with known derivative ``fprime``.

    Numerically the same estimator as :func:`ut_nodes` / :func:`mc_nodes`,
    but with a single fused backward pass.
    """
    if mode.kind == "mcvi":
        n = mode.samples
        offsets = mode.rng.standard_normal(x.mean.shape + (n,))
        weights = np.full(n, 1.0 / n)
        scale = n / (n - 1.0)
    else:
        weights, spread = sigma_weights(mode.kappa)
        offsets = np.array([0.0, -spread, spread])
        scale = 1.0
    out = ad.point_moments(x.mean, x.var, offsets, weights, f, fprime, scale)
    return Moments(ad.take_last(out, 0), ad.take_last(out, 1))


def _check_finite(m: Moments, what):
    for arr in (ad.value_of(m.mean), ad.value_of(m.var)):
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise PropagationError(f"{what}: non-finite output at element {idx}")
    return m


def propagate(x: Moments, f, mode: PropagationMode, analytic=None) -> Moments:
    """Route an elementwise nonlinearity through ``mode``.

    SMP uses ``analytic`` when given and otherwise falls back to the
    unscented transform.
    """
    if mode.kind == "smp" and analytic is not None:
        return analytic(x)
    if mode.kind in ("smp", "utvi"):
        return ut_nodes(x, f, mode.kappa)
    return mc_nodes(x, f, mode.samples, mode.rng)


def leaky_relu_moments(x: Moments, slope=DEFAULT_SLOPE) -> Moments:
    """Exact mean and variance of leaky-ReLU applied to N(mean, var).

    Writing f(x) = a*x + (1 - a)*relu(x) and using the rectified-Normal
    moments m1 = mu*Phi(z) + s*phi(z), m2 = (mu^2 + s^2)*Phi(z) + mu*s*phi(z)
    with z = mu/s:  E[f] = a*mu + (1 - a)*m1,
    E[f^2] = a^2*(mu^2 + s^2) + (1 - a^2)*m2.
    Zero-variance elements fall back to (f(mu), 0).
    """
    mu, v = x.mean, x.var
    vv = ad.value_of(v)
    pos = vv > 0
    s = ad.sqrt(ad.where(pos, v, 1.0))
    z = mu / s
    cdf = ad.normal_cdf(z)
    pdf = ad.exp(ad.square(z) * -0.5) * (1.0 / math.sqrt(2.0 * math.pi))
    mu2 = ad.square(mu)
    m1 = mu * cdf + s * pdf
    m2 = (mu2 + v) * cdf + mu * s * pdf
    mean = slope * mu + (1.0 - slope) * m1
    second = (slope * slope) * (mu2 + v) + (1.0 - slope * slope) * m2
    var = ad.maximum(second - ad.square(mean), 0.0)
    if pos.all():
        return Moments(mean, var)
    return Moments(ad.where(pos, mean, ad.leaky_relu(mu, slope)), ad.where(pos, var, 0.0))


# -- layers -------------------------------------------------------------------

def linear_moments(mean, var, w_mean, w_var, b_mean, b_var) -> Moments:
    """Moments of x @ W.T + b for independent x, W, b.

    var = Vx @ (Vw + Mw^2).T + Mx^2 @ Vw.T + Vb, i.e. the per-term product
    rule summed over inputs.
    """
    out_mean = ad.matmul(mean, w_mean.T) + b_mean
    out_var = (ad.matmul(var, (w_var + ad.square(w_mean)).T)
               + ad.matmul(ad.square(mean), w_var.T) + b_var)
    return Moments(out_mean, out_var)


class Layer:
    """Base class; subclasses declare parameter shapes and a forward rule."""

    stochastic = False

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def describe(self):
        return {"type": type(self).__name__, **self.config()}

    def config(self):
        return {}

    def forward(self, x: Moments, p, mode) -> Moments:
        raise NotImplementedError


class BayesianLinear(Layer):
    stochastic = True

    def __init__(self, in_features, out_features):
        if in_features <= 0 or out_features <= 0:
            raise ParameterError("feature counts must be positive")
        self.in_features = in_features
        self.out_features = out_features

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def param_shapes(self):
        w = (self.out_features, self.in_features)
        b = (self.out_features,)
        return {"weight_mean": w, "weight_rho": w, "bias_mean": b, "bias_rho": b}

    def fan_in(self):
        return self.in_features

    def init_params(self, rng):
        shapes = self.param_shapes()
        rho0 = softplus_inv(INIT_SIGMA)
        return {
            "weight_mean": rng.normal(0.0, 1.0 / math.sqrt(self.fan_in()), size=shapes["weight_mean"]),
            "weight_rho": np.full(shapes["weight_rho"], rho0),
            "bias_mean": np.zeros(shapes["bias_mean"]),
            "bias_rho": np.full(shapes["bias_rho"], rho0),
        }

    @staticmethod
    def variances(p):
        w_var = ad.square(ad.softplus(p["weight_rho"]))
        b_var = ad.square(ad.softplus(p["bias_rho"]))
        return w_var, b_var

    def forward(self, x, p, mode=None):
        if x.mean.shape[-1] != self.in_features:
            raise ShapeError(f"expected {self.in_features} input features, got {x.mean.shape[-1]}")
        w_var, b_var = self.variances(p)
        return linear_moments(x.mean, x.var, p["weight_mean"], w_var, p["bias_mean"], b_var)


def _im2col_index(channels, height, width, k, stride):
    ho = (height - k) // stride + 1
    wo = (width - k) // stride + 1
    c, di, dj = np.meshgrid(np.arange(channels), np.arange(k), np.arange(k), indexing="ij")
    oi, oj = np.meshgrid(np.arange(ho) * stride, np.arange(wo) * stride, indexing="ij")
    rows = oi.reshape(-1, 1) + di.reshape(1, -1)
    cols = oj.reshape(-1, 1) + dj.reshape(1, -1)
    chans = np.broadcast_to(c.reshape(1, -1), rows.shape)
    return chans, rows, cols, ho, wo


class BayesianConv2d(BayesianLinear):
    """Valid (unpadded) 2-D convolution with independent Normal kernel entries.

    Input is (batch, channels, H, W); each receptive field is flattened and
    pushed through :func:`linear_moments`.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1):
        if kernel_size <= 0 or stride <= 0:
            raise ParameterError("kernel_size and stride must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        super().__init__(in_channels * kernel_size * kernel_size, out_channels)

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride}

    def param_shapes(self):
        k = self.kernel_size
        w = (self.out_channels, self.in_channels, k, k)
        b = (self.out_channels,)
        return {"weight_mean": w, "weight_rho": w, "bias_mean": b, "bias_rho": b}

    def output_hw(self, height, width):
        k, s = self.kernel_size, self.stride
        if k > height or k > width:
            raise ShapeError(f"kernel {k} larger than input {height}x{width}")
        return (height - k) // s + 1, (width - k) // s + 1

    def forward(self, x, p, mode=None):
        b, c, h, w = x.mean.shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {c}")
        self.output_hw(h, w)
        chans, rows, cols, ho, wo = _im2col_index(c, h, w, self.kernel_size, self.stride)
        idx = (slice(None), chans, rows, cols)
        cols_mean = ad.reshape(ad.getitem(x.mean, idx), (b * ho * wo, self.in_features))
        cols_var = ad.reshape(ad.getitem(x.var, idx), (b * ho * wo, self.in_features))
        w_mean = ad.reshape(p["weight_mean"], (self.out_channels, self.in_features))
        w_var, b_var = self.variances(p)
        w_var = ad.reshape(w_var, (self.out_channels, self.in_features))
        out = linear_moments(cols_mean, cols_var, w_mean, w_var, p["bias_mean"], b_var)

        def to_nchw(t):
            return ad.transpose(ad.reshape(t, (b, ho, wo, self.out_channels)), (0, 3, 1, 2))

        return Moments(to_nchw(out.mean), to_nchw(out.var))


class LeakyReLU(Layer):
    def __init__(self, slope=DEFAULT_SLOPE):
        self.slope = slope

    def config(self):
        return {"slope": self.slope}

    def forward(self, x, p, mode):
        slope = self.slope
        if mode.kind == "smp":
            out = leaky_relu_moments(x, slope)
        else:
            out = fused_moments(x, lambda t: ad.leaky_relu_value(t, slope),
                                lambda t: ad.leaky_relu_grad(t, slope), mode)
        return _check_finite(out, "leaky_relu")


class Flatten(Layer):
    def forward(self, x, p, mode=None):
        b = x.mean.shape[0]
        return Moments(ad.reshape(x.mean, (b, -1)), ad.reshape(x.var, (b, -1)))


class Scale(Layer):
    """Fixed (non-learnable) rescaling of the input."""

    def __init__(self, factor):
        self.factor = float(factor)

    def config(self):
        return {"factor": self.factor}

    def forward(self, x, p, mode=None):
        f = self.factor
        return Moments(x.mean * f, x.var * (f * f))


# -- physics-informed output heads -------------------------------------------

def inverse_cdf_fn(prior_mean, prior_sigma, scale, eps=PROB_CLAMP):
    """g(t) = prior_mean + prior_sigma * Phi^-1(clamp(sigmoid(t / scale)))."""

    def g(t):
        p = ad.clip(ad.sigmoid(t / scale), eps, 1.0 - eps)
        return prior_mean + prior_sigma * ad.normal_inv_cdf(p)

    return g


def photon_prior_nodes(pos_mean, sim: SimParams):
    """Expected in-frame photon count at the predicted position (autodiff).

    ``pos_mean`` has shape (batch, 2) holding (x, y).
    """
    half = sim.L / 2.0
    inv = 1.0 / sim.sigma_b
    upper = ad.normal_cdf((half - pos_mean) * inv)
    lower = ad.normal_cdf((-half - pos_mean) * inv)
    frac = upper - lower
    n_i = ad.take_last(frac, 0) * ad.take_last(frac, 1) * sim.N
    if np.any(ad.value_of(n_i) <= 0):
        raise PropagationError("in-frame photon count is not positive")
    return n_i


def inverse_cdf_head(x: GaussianTensor, prior_mean, prior_sigma, a, mode=None, eps=PROB_CLAMP):
    """Propagate ``x`` through the sigmoid / inverse-CDF activation chain.

    Never propagated analytically: SMP and UTVI use sigma points, MCVI samples.
    """
    if not a > 0 or not np.all(np.asarray(prior_sigma) > 0):
        raise ParameterError("scale a and prior_sigma must be positive")
    mode = mode or PropagationMode.utvi()
    g = inverse_cdf_fn(np.asarray(prior_mean)[..., None], np.asarray(prior_sigma)[..., None], a, eps)
    out = propagate(Moments.of(x), g, mode)
    return _check_finite(out, "inverse_cdf_head").to_tensor()


def photon_count_head(position: GaussianTensor, photon: GaussianTensor, sim=SimParams(), a=1.0, mode=None):
    """Photon-node activation with prior N(N_i, N_i) at the predicted position means."""
    pos = np.atleast_2d(position.mean)
    n_i = ad.value_of(photon_prior_nodes(ad.constant(pos), sim))
    n_i = n_i.reshape(np.shape(photon.mean))
    return inverse_cdf_head(photon, n_i, np.sqrt(n_i), a, mode)


class LocalizationHeads(Layer):
    """Position heads (prior N(0, prior_sigma^2)) followed by the photon head.

    Input has three nodes (x, y, photons).  Each node has its own learnable
    sigmoid scale ``a = exp(log_scale)``; these are deterministic parameters.
    """

    def __init__(self, sim: SimParams = SimParams(), prior_sigma=2.0, eps=PROB_CLAMP):
        self.sim = sim
        self.prior_sigma = float(prior_sigma)
        self.eps = eps

    def config(self):
        return {"sim": self.sim.to_dict(), "prior_sigma": self.prior_sigma, "eps": self.eps}

    def param_shapes(self):
        return {"log_scale": (3,)}

    def init_params(self, rng):
        return {"log_scale": np.zeros(3)}

    def forward(self, x, p, mode):
        if x.mean.shape[-1] != 3:
            raise ShapeError("localization heads expect 3 input nodes")
        _check_finite(x, "localization head input")
        scale = ad.exp(p["log_scale"])
        pos_in = Moments(x.mean[:, :2], x.var[:, :2])
        pos_scale = ad.reshape(scale[:2], (2, 1))
        pos = propagate(pos_in, inverse_cdf_fn(0.0, self.prior_sigma, pos_scale, self.eps), mode)
        pos = _check_finite(pos, "position head")

        n_i = ad.reshape(photon_prior_nodes(pos.mean, self.sim), (-1, 1, 1))
        ph_in = Moments(x.mean[:, 2:], x.var[:, 2:])
        g = inverse_cdf_fn(n_i, ad.sqrt(n_i), scale[2], self.eps)
        ph = _check_finite(propagate(ph_in, g, mode), "photon head")
        return Moments(ad.concatenate([pos.mean, ph.mean], axis=1),
                       ad.concatenate([pos.var, ph.var], axis=1))


class GaussianOutput(Layer):
    """Collapse a (mean node, log-variance node) pair into one predictive Normal.

    By the law of total variance the predictive variance is the propagated
    variance of the mean node plus E[exp(s)] for the log-variance node s,
    which for s ~ N(m, v) is exp(m + v/2).  The exponent is capped at
    ``max_log_var`` to keep early training finite.
    """

    def __init__(self, max_log_var=50.0):
        self.max_log_var = float(max_log_var)

    def config(self):
        return {"max_log_var": self.max_log_var}

    def forward(self, x, p, mode=None):
        if x.mean.shape[-1] != 2:
            raise ShapeError("GaussianOutput expects 2 input nodes")
        mean = x.mean[:, :1]
        log_var = ad.minimum(x.mean[:, 1:] + x.var[:, 1:] * 0.5, self.max_log_var)
        return Moments(mean, x.var[:, :1] + ad.exp(log_var))


LAYER_TYPES = {
    cls.__name__: cls
    for cls in (BayesianLinear, BayesianConv2d, LeakyReLU, Flatten, Scale, LocalizationHeads,
                GaussianOutput)
}


def layer_from_description(desc):
    desc = dict(desc)
    cls = LAYER_TYPES[desc.pop("type")]
    if cls is LocalizationHeads:
        desc["sim"] = SimParams(**desc["sim"])
    return cls(**desc)


# -- standalone GaussianTensor entry points ----------------------------------

def _const_params(layer):
    return {k: ad.constant(v) for k, v in layer.params.items()}


def bayes_linear_forward(x: GaussianTensor, layer: "ParamLayer") -> GaussianTensor:
    return layer.layer.forward(Moments.of(x), _const_params(layer)).to_tensor()


def bayes_conv2d_forward(x: GaussianTensor, layer: "ParamLayer") -> GaussianTensor:
    squeeze = x.mean.ndim == 3
    m = Moments.of(x)
    if squeeze:
        m = Moments(ad.reshape(m.mean, (1,) + x.shape), ad.reshape(m.var, (1,) + x.shape))
    out = layer.layer.forward(m, _const_params(layer)).to_tensor()
    return out[0] if squeeze else out


@dataclass
class ParamLayer:
    """A layer bundled with concrete parameter arrays."""

    layer: Layer
    params: dict

    @classmethod
    def create(cls, layer, rng=None, **overrides):
        params = layer.init_params(rng or np.random.default_rng(0))
        params.update({k: np.asarray(v, dtype=np.float64) for k, v in overrides.items()})
        return cls(layer, params)


def leaky_relu_smp(x: GaussianTensor, slope=DEFAULT_SLOPE) -> GaussianTensor:
    return leaky_relu_moments(Moments.of(x), slope).to_tensor()


def nonlinearity_utvi(x: GaussianTensor, f, kappa=DEFAULT_KAPPA) -> GaussianTensor:
    """``f`` must accept and return autodiff nodes (or plain arrays)."""
    return _check_finite(ut_nodes(Moments.of(x), f, kappa), "utvi").to_tensor()


def nonlinearity_mcvi(x: GaussianTensor, f, n, rng) -> GaussianTensor:
    return _check_finite(mc_nodes(Moments.of(x), f, n, rng), "mcvi").to_tensor()
