"""ELBO training with KL annealing and AdamW."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .datagen import SimParams, gen_regression_batch, simulate_batch
from .errors import ArtifactMismatch, DomainError, NumericalFailure, ParameterError, PropagationError
from .layers import (
    BayesianConv2d, BayesianLinear, Flatten, GaussianOutput, LeakyReLU, LocalizationHeads, Moments,
    PropagationMode, Scale, DEFAULT_SLOPE,
)
from .model import Model

VAR_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_FORMAT = "utvi-checkpoint/1"
LOG_HEADER = "epoch,train_loss,val_nll,kl_scale,wall_ms"


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 50
    batches_per_epoch: int = 100
    batch_size: int = 128
    mode: str = "utvi"
    kappa: float = 2.0
    mc_samples: int = 3
    seed: int = 0
    prior_sigma: float = 1.0
    val_size: int = 1024
    val_seed: int = 2024
    eval_chunk: int = 512
    record_wall_time: bool = True

    def __post_init__(self):
        for name in ("learning_rate", "epsilon", "prior_sigma", "kappa"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError("betas must lie in [0, 1)")
        for name in ("epochs", "batches_per_epoch", "batch_size", "val_size", "eval_chunk"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.mode not in ("smp", "utvi", "mcvi"):
            raise ParameterError(f"unknown mode {self.mode!r}")
        if self.mode == "mcvi" and self.mc_samples < 2:
            raise ParameterError("mc_samples must be >= 2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def propagation_mode(self, rng=None):
        if self.mode == "mcvi":
            return PropagationMode.mcvi(self.mc_samples, rng)
        return PropagationMode(self.mode, kappa=self.kappa)


# -- model builders ------------------------------------------------------------

def build_regression_model(hidden=128, slope=DEFAULT_SLOPE, variance_head=True):
    """1 -> hidden -> hidden -> 2 with a (mean, log-variance) output pair.

    With ``variance_head=False`` the net ends in a single node whose propagated
    variance alone is the predictive variance.
    """
    layers = [
        BayesianLinear(1, hidden), LeakyReLU(slope),
        BayesianLinear(hidden, hidden), LeakyReLU(slope),
        BayesianLinear(hidden, 2 if variance_head else 1),
    ]
    if variance_head:
        layers.append(GaussianOutput())
    return Model(layers, name="regression")


def build_localizer_model(sim=SimParams(), channels=8, hidden=128, kernel=3, heads=True,
                          input_scale=0.1, slope=DEFAULT_SLOPE, position_prior_sigma=2.0):
    conv = BayesianConv2d(1, channels, kernel, stride=1)
    ho, wo = conv.output_hw(sim.L, sim.L)
    layers = [
        Scale(input_scale),
        conv, LeakyReLU(slope), Flatten(),
        BayesianLinear(channels * ho * wo, hidden), LeakyReLU(slope),
        BayesianLinear(hidden, 3),
    ]
    if heads:
        layers.append(LocalizationHeads(sim, position_prior_sigma))
    return Model(layers, name="localizer" if heads else "localizer-plain")


# -- data sources --------------------------------------------------------------

class RegressionSource:
    task = "regression"

    def __init__(self, x_low=-1.0, x_high=2.0):
        self.x_low = x_low
        self.x_high = x_high

    def batch(self, rng, n):
        b = gen_regression_batch(n, rng, self.x_low, self.x_high)
        return b.x[:, None], b.y[:, None]

    def validation(self, n, seed):
        return self.batch(np.random.default_rng(seed), n)


class LocalizationSource:
    task = "localization"

    def __init__(self, sim=SimParams()):
        self.sim = sim

    @staticmethod
    def arrays(batch):
        images = batch.images.astype(np.float64)[:, None, :, :]
        return images, batch.targets()

    def batch(self, rng, n):
        return self.arrays(simulate_batch(rng, n, self.sim))

    def validation(self, n, seed):
        return self.batch(np.random.default_rng(seed), n)


class FixedDataset:
    """A finite training set; each batch is drawn without replacement from it."""

    def __init__(self, inputs, targets, validation_source, task=None):
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.targets = np.asarray(targets, dtype=np.float64)
        self.validation_source = validation_source
        self.task = task or validation_source.task

    def __len__(self):
        return len(self.inputs)

    def batch(self, rng, n):
        idx = rng.choice(len(self.inputs), size=min(n, len(self.inputs)), replace=False)
        return self.inputs[idx], self.targets[idx]

    def validation(self, n, seed):
        return self.validation_source.validation(n, seed)


# -- objective -----------------------------------------------------------------

def nll_nodes(pred: Moments, target):
    var = ad.maximum(pred.var, VAR_FLOOR)
    resid = ad.square(pred.mean - target)
    terms = 0.5 * (ad.log(var) + LOG_2PI) + resid / (2.0 * var)
    return ad.mean(terms), terms


def gaussian_nll(pred, target):
    """Mean Gaussian NLL over batch and output nodes, variance floored at 1e-6."""
    if not isinstance(pred, Moments):
        pred = Moments.of(pred)
    loss, _ = nll_nodes(pred, np.asarray(target, dtype=np.float64))
    return float(ad.value_of(loss))


def nll_per_node(mean, var, target):
    var = np.maximum(var, VAR_FLOOR)
    return 0.5 * (np.log(var) + LOG_2PI) + (mean - target) ** 2 / (2.0 * var)


def kl_nodes(model, params, prior_sigma=1.0):
    total = 0.0
    for mk, rk in model.stochastic_keys():
        mu, rho = params[mk], params[rk]
        sigma = ad.softplus(rho)
        kl = (math.log(prior_sigma) - ad.log(sigma)
              + (ad.square(sigma) + ad.square(mu)) / (2.0 * prior_sigma**2) - 0.5)
        total = total + ad.sum(kl)
    return total


def kl_to_prior(model, prior_sigma=1.0, params=None):
    """KL(q || N(0, prior_sigma^2)) summed over every weight and bias."""
    params = model.params if params is None else params
    return float(ad.value_of(kl_nodes(model, {k: ad.constant(v) for k, v in params.items()}, prior_sigma)))


def kl_scale(epoch, epochs):
    """Annealing factor 2^(M-l) / (2^M - 1) for epoch l of M."""
    if not 1 <= epoch <= epochs:
        raise ParameterError(f"epoch {epoch} outside 1..{epochs}")
    return math.ldexp(1.0, epochs - epoch) / (math.ldexp(1.0, epochs) - 1.0)


def elbo_nodes(model, params, inputs, targets, mode, phi, batches_per_epoch, prior_sigma):
    pred = model.forward(inputs, mode, params)
    nll, terms = nll_nodes(pred, targets)
    kl = kl_nodes(model, params, prior_sigma)
    return nll + kl * (phi / batches_per_epoch), nll, terms


def elbo_loss(model, batch, epoch, config: TrainConfig, params=None, rng=None):
    """NLL + kl_scale(epoch) * KL / batches_per_epoch as a float."""
    inputs, targets = batch
    params = model.params if params is None else params
    mode = config.propagation_mode(rng)
    phi = kl_scale(epoch, config.epochs)
    loss, _, _ = elbo_nodes(model, {k: ad.constant(v) for k, v in params.items()}, inputs, targets,
                            mode, phi, config.batches_per_epoch, config.prior_sigma)
    return float(ad.value_of(loss))


def loss_and_grad(model, params, batch, mode, phi, batches_per_epoch, prior_sigma=1.0):
    tape = ad.Tape()
    nodes = {k: tape.parameter(k, v) for k, v in params.items()}
    loss, _, _ = elbo_nodes(model, nodes, batch[0], batch[1], mode, phi, batches_per_epoch, prior_sigma)
    return float(ad.value_of(loss)), tape.backward(loss)


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adamw_step(params, grads, state: OptimizerState, config: TrainConfig):
    """One AdamW update: bias-corrected Adam plus decoupled decay theta -= lr*wd*theta.

    Returns new (params, state); inputs are not modified.
    """
    ad.check_shapes(params, grads)
    if not state.m:
        state = OptimizerState.zeros_like(params)
    t = state.step + 1
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, theta in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        theta = theta - lr * config.weight_decay * theta
        theta = theta - (lr / bc1) * m / (np.sqrt(v) / math.sqrt(bc2) + config.epsilon)
        new_params[k], new_m[k], new_v[k] = theta, m, v
    return new_params, OptimizerState(new_m, new_v, t)


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    layers: list
    params: dict
    epoch: int
    seed: int
    rng_state: dict
    best: bool = False
    val_nll: float = float("nan")
    model_name: str = "custom"

    def model(self):
        return Model.from_description(self.layers, name=self.model_name, params=self.params)

    def to_json(self):
        placeholders = {}
        params_doc = {}
        for i, (k, v) in enumerate(sorted(self.params.items())):
            token = f"@@ARRAY{i}@@"
            placeholders[f'"{token}"'] = "[" + ", ".join(f"{x:.17g}" for x in np.ravel(v)) + "]"
            params_doc[k] = {"shape": list(np.shape(v)), "data": token}
        doc = {
            "format": CHECKPOINT_FORMAT,
            "model": self.model_name,
            "config": self.config,
            "layers": self.layers,
            "params": params_doc,
            "epoch": self.epoch,
            "seed": self.seed,
            "rng_state": self.rng_state,
            "best": self.best,
            "val_nll": f"{self.val_nll:.17g}",
        }
        text = json.dumps(doc, indent=1, sort_keys=True)
        for token, arr in placeholders.items():
            text = text.replace(token, arr)
        return text + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ArtifactMismatch("not a utvi checkpoint")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        return cls(doc["config"], doc["layers"], params, doc["epoch"], doc["seed"],
                   doc["rng_state"], doc["best"], float(doc["val_nll"]), doc["model"])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


# -- training loop -------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_nll: float
    kl_scale: float
    wall_ms: float

    def csv_row(self):
        return f"{self.epoch},{self.train_loss:.17g},{self.val_nll:.17g},{self.kl_scale:.17g},{self.wall_ms:.3f}"


@dataclass
class TrainResult:
    history: list
    best: Checkpoint
    final: Checkpoint

    @property
    def best_val_nll(self):
        return self.best.val_nll

    def log_csv(self):
        return "\n".join([LOG_HEADER] + [r.csv_row() for r in self.history]) + "\n"


def rng_streams(seed):
    """Independent generators for initialization, data, MC draws and validation draws."""
    init, data, mc, val = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(init), np.random.default_rng(data),
            np.random.default_rng(mc), val)


def evaluate_nll(model, inputs, targets, mode, chunk=512):
    mean, var = model.predict(inputs, mode, chunk=chunk)
    return float(np.mean(nll_per_node(mean, var, targets)))


def _offending_node(model, params, batch, mode):
    try:
        pred = model.forward(batch[0], mode, params)
    except (PropagationError, DomainError, FloatingPointError) as exc:
        return str(exc)
    terms = nll_per_node(ad.value_of(pred.mean), ad.value_of(pred.var), batch[1])
    bad = np.argwhere(~np.isfinite(terms))
    return None if len(bad) == 0 else [int(i) for i in bad[0]]


def train(model, source, config: TrainConfig, validation=None, on_epoch=None):
    """Train ``model`` in place and return the epoch history plus checkpoints.

    Every batch is freshly drawn from ``source``; the best checkpoint is the
    one with the lowest validation NLL.
    """
    init_rng, data_rng, mc_rng, val_seq = rng_streams(config.seed)
    if not model.params:
        model.init(init_rng)
    params = dict(model.params)
    state = OptimizerState.zeros_like(params)
    if validation is None:
        validation = source.validation(config.val_size, config.val_seed)
    val_x, val_y = validation
    history = []
    best = None
    cfg = config.to_dict()
    layers = model.describe()

    def snapshot(epoch, val_nll, is_best):
        return Checkpoint(cfg, layers, {k: v.copy() for k, v in params.items()}, epoch,
                          config.seed, data_rng.bit_generator.state, is_best, val_nll, model.name)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            phi = kl_scale(epoch, config.epochs)
            total = 0.0
            for b in range(config.batches_per_epoch):
                batch = source.batch(data_rng, config.batch_size)
                mode = config.propagation_mode(mc_rng)
                try:
                    loss, grads = loss_and_grad(model, params, batch, mode, phi,
                                                config.batches_per_epoch, config.prior_sigma)
                except (PropagationError, DomainError) as exc:
                    raise NumericalFailure(f"forward pass failed: {exc}", epoch, b + 1) from exc
                if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    node = _offending_node(model, params, batch, config.propagation_mode(mc_rng))
                    raise NumericalFailure("non-finite loss or gradient", epoch, b + 1, node)
                params, state = adamw_step(params, grads, state, config)
                total += loss
            model.params = params
            val_mode = config.propagation_mode(np.random.default_rng(val_seq))
            try:
                val_nll = evaluate_nll(model, val_x, val_y, val_mode, config.eval_chunk)
            except (PropagationError, DomainError) as exc:
                raise NumericalFailure(f"validation failed: {exc}", epoch) from exc
            if not math.isfinite(val_nll):
                raise NumericalFailure("non-finite validation NLL", epoch)
            wall = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else 0.0
            rec = EpochRecord(epoch, total / config.batches_per_epoch, val_nll, phi, wall)
            history.append(rec)
            if best is None or val_nll < best.val_nll:
                best = snapshot(epoch, val_nll, True)
            if on_epoch is not None:
                on_epoch(rec)
    final = snapshot(config.epochs, history[-1].val_nll, best.epoch == config.epochs)
    model.params = params
    return TrainResult(history, best, final)
