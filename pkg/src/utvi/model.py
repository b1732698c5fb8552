"""Ordered layer stacks with named parameters."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ArtifactMismatch
from .layers import LocalizationHeads, Moments, PropagationMode, layer_from_description


class Model:
    """A feed-forward stack of layers.

    Parameters live in ``self.params`` keyed ``"<layer index>.<name>"``.
    ``forward`` accepts any mapping with the same keys, so a training step can
    pass tape-registered nodes instead of arrays.
    """

    def __init__(self, layers, name="custom", params=None):
        self.layers = list(layers)
        self.name = name
        self.params = params if params is not None else {}

    @property
    def head(self):
        return "inverse_cdf" if any(isinstance(l, LocalizationHeads) for l in self.layers) else "plain"

    def param_shapes(self):
        return {
            f"{i}.{k}": shape
            for i, layer in enumerate(self.layers)
            for k, shape in layer.param_shapes().items()
        }

    def init(self, rng):
        self.params = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.init_params(rng).items():
                self.params[f"{i}.{k}"] = np.asarray(v, dtype=np.float64)
        return self

    def n_parameters(self):
        return int(sum(int(np.prod(s)) for s in self.param_shapes().values()))

    def stochastic_keys(self):
        """(mean key, rho key) pairs of every Normal-distributed parameter."""
        pairs = []
        for i, layer in enumerate(self.layers):
            if layer.stochastic:
                pairs.append((f"{i}.weight_mean", f"{i}.weight_rho"))
                pairs.append((f"{i}.bias_mean", f"{i}.bias_rho"))
        return pairs

    def forward(self, x, mode: PropagationMode, params=None) -> Moments:
        params = self.params if params is None else params
        h = Moments.of(x)
        for i, layer in enumerate(self.layers):
            prefix = f"{i}."
            p = {k[len(prefix):]: ad.constant(v) if not isinstance(v, ad.Node) else v
                 for k, v in params.items() if k.startswith(prefix)}
            h = layer.forward(h, p, mode)
        return h

    def predict(self, x, mode: PropagationMode, chunk=None):
        """Predictive (mean, variance) arrays, evaluated without a tape."""
        x = np.asarray(x, dtype=np.float64)
        if chunk is None or len(x) <= chunk:
            out = self.forward(x, mode)
            return ad.value_of(out.mean), ad.value_of(out.var)
        means, vars_ = [], []
        for lo in range(0, len(x), chunk):
            out = self.forward(x[lo:lo + chunk], mode)
            means.append(ad.value_of(out.mean))
            vars_.append(ad.value_of(out.var))
        return np.concatenate(means), np.concatenate(vars_)

    def describe(self):
        return [layer.describe() for layer in self.layers]

    @classmethod
    def from_description(cls, layers, name="custom", params=None):
        model = cls([layer_from_description(d) for d in layers], name=name)
        if params is not None:
            model.load_params(params)
        return model

    def load_params(self, params):
        expected = self.param_shapes()
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ArtifactMismatch(f"parameter names differ (missing {missing}, unexpected {extra})")
        for k, shape in expected.items():
            if tuple(np.shape(params[k])) != tuple(shape):
                raise ArtifactMismatch(f"{k}: shape {np.shape(params[k])} != expected {shape}")
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in expected}
        return self

    def copy(self):
        return Model(self.layers, self.name, {k: v.copy() for k, v in self.params.items()})
