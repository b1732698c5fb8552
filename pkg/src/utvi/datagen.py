"""Synthetic data for the heteroscedastic regression and emitter localization tasks."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import moments
from .errors import ParameterError


@dataclass(frozen=True)
class SimParams:
    """Emitter simulation constants, lengths in pixels.

    ``sigma_b`` must equal ``0.21 * wavelength / na``; override all three
    together.
    """

    N: float = 100.0
    L: int = 8
    sigma_b: float = 1.05
    sigma_r: float = 2.0
    wavelength: float = 6.0
    na: float = 1.2

    def __post_init__(self):
        for name in ("N", "L", "sigma_b", "sigma_r", "wavelength", "na"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"SimParams.{name} must be positive")
        if abs(self.sigma_b - 0.21 * self.wavelength / self.na) > 1e-12:
            raise ParameterError("sigma_b must equal 0.21 * wavelength / na")

    def to_dict(self):
        return asdict(self)

    @property
    def n_pixels(self):
        return self.L * self.L


@dataclass
class RegressionBatch:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.x)


@dataclass
class EmitterSample:
    image: np.ndarray
    position: np.ndarray
    n_detected: float


@dataclass
class EmitterBatch:
    images: np.ndarray  # (n, L, L) photon counts
    positions: np.ndarray  # (n, 2) as (x, y)
    n_detected: np.ndarray  # (n,)

    def __len__(self):
        return len(self.images)

    def targets(self):
        return np.column_stack([self.positions, self.n_detected])


def noise_sigma(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.1 + 0.2 * np.sin(2.0 * np.pi * x - np.pi / 2.0) ** 2


def gen_regression_batch(n, rng, x_low=-1.0, x_high=2.0):
    if n <= 0:
        raise ParameterError("n must be positive")
    if not x_low < x_high:
        raise ParameterError("x_low must be < x_high")
    x = rng.uniform(x_low, x_high, size=n)
    y = x + noise_sigma(x) * rng.standard_normal(n)
    return RegressionBatch(x, y)


def ground_truth_nll(x_low=-1.0, x_high=2.0):
    """Expected NLL of the true conditional density under x ~ U(x_low, x_high)."""
    from scipy import integrate

    def integrand(x):
        return 0.5 * math.log(2.0 * math.pi * float(noise_sigma(x)) ** 2) + 0.5

    # the integrand has period 0.5; split so quad sees smooth pieces
    edges = np.arange(math.floor(x_low * 2) / 2, x_high + 0.5, 0.5)
    edges = np.clip(edges, x_low, x_high)
    total = sum(integrate.quad(integrand, a, b, epsabs=1e-13, epsrel=1e-13)[0]
                for a, b in zip(edges[:-1], edges[1:]) if b > a)
    return total / (x_high - x_low)


def _axis_fractions(c, sim):
    """Fraction of a 1-D Gaussian PSF centered at ``c`` landing in each pixel."""
    c = np.asarray(c, dtype=np.float64)
    edges = np.arange(sim.L + 1) - sim.L / 2.0
    cdf = moments.normal_cdf((edges - c[..., None]) / sim.sigma_b)
    return np.diff(cdf, axis=-1)


def expected_photons(x, y, sim):
    """In-frame photon count for an emitter at (x, y): N times the Normal
    mass over the image square."""
    half = sim.L / 2.0
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    fx = moments.normal_cdf((half - x) / sim.sigma_b) - moments.normal_cdf((-half - x) / sim.sigma_b)
    fy = moments.normal_cdf((half - y) / sim.sigma_b) - moments.normal_cdf((-half - y) / sim.sigma_b)
    return sim.N * fx * fy


def expected_image(r, sim=SimParams()):
    """Pixel-integrated PSF, rows indexed by y and columns by x.

    Pixel ``p`` along an axis spans ``[p - L/2, p + 1 - L/2]`` so the image
    covers ``[-L/2, L/2]^2`` with the origin at its center.
    """
    r = np.asarray(r, dtype=np.float64)
    fx = _axis_fractions(r[..., 0], sim)
    fy = _axis_fractions(r[..., 1], sim)
    return sim.N * fy[..., :, None] * fx[..., None, :]


def simulate_batch(rng, n, sim=SimParams(), positions=None):
    """Draw ``n`` emitters (or use ``positions``) and Poisson-corrupt their images."""
    if positions is None:
        positions = rng.normal(0.0, sim.sigma_r, size=(n, 2))
    positions = np.asarray(positions, dtype=np.float64)
    lam = expected_image(positions, sim)
    images = rng.poisson(lam)
    return EmitterBatch(images, positions, lam.sum(axis=(-2, -1)))


def simulate_emitter(rng, sim=SimParams()):
    b = simulate_batch(rng, 1, sim)
    return EmitterSample(b.images[0], b.positions[0], float(b.n_detected[0]))


def _fmt(v):
    return f"{v:.17g}"


def write_regression_csv(path, batch):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in zip(batch.x, batch.y):
            w.writerow([_fmt(x), _fmt(y)])


def read_regression_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return RegressionBatch(data[:, 0].copy(), data[:, 1].copy())


def localization_header(sim=SimParams()):
    return [f"px_{i}" for i in range(sim.n_pixels)] + ["x", "y", "n_detected"]


def write_localization_csv(path, batch, sim=SimParams()):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(localization_header(sim))
        for img, pos, nd in zip(batch.images, batch.positions, batch.n_detected):
            row = [str(int(v)) for v in img.ravel()]
            row += [_fmt(pos[0]), _fmt(pos[1]), _fmt(nd)]
            w.writerow(row)


def read_localization_csv(path, sim=SimParams()):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header != localization_header(sim):
        raise ParameterError(f"{path}: unexpected localization CSV header")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    npx = sim.n_pixels
    images = data[:, :npx].reshape(-1, sim.L, sim.L).astype(np.int64)
    return EmitterBatch(images, data[:, npx:npx + 2].copy(), data[:, npx + 2].copy())
