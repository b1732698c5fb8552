"""Evaluation metrics, localization variance maps, sample sweeps and timing."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .datagen import SimParams, expected_photons, simulate_batch
from .errors import ParameterError
from .layers import PropagationMode
from .training import (
    FixedDataset, LocalizationSource, TrainConfig, build_localizer_model, nll_per_node, train,
)

NLL_SWEEP_HEADER = ["mode", "samples", "seed", "best_val_nll"]
TIMING_HEADER = ["mode", "samples", "batch", "median_ms", "iqr_ms"]
MAP_HEADER = ["row", "col", "value", "count"]


def resolve_mode(mode, samples=None, seed=0):
    """Build a PropagationMode from a name; ``samples`` only matters for MCVI."""
    if isinstance(mode, PropagationMode):
        return mode
    if mode == "mcvi":
        if samples is None:
            raise ParameterError("MCVI evaluation needs a sample count")
        return PropagationMode.mcvi(int(samples), np.random.default_rng(seed))
    return PropagationMode(mode)


@dataclass
class EvalReport:
    mode: str
    samples: int
    nll: float = float("nan")
    mean: np.ndarray | None = field(default=None, repr=False)
    var: np.ndarray | None = field(default=None, repr=False)
    median_ms: float = float("nan")
    iqr_ms: float = float("nan")

    def to_dict(self):
        return {"mode": self.mode, "samples": self.samples, "nll": self.nll,
                "median_ms": self.median_ms, "iqr_ms": self.iqr_ms}


def _members(models):
    return list(models) if isinstance(models, (list, tuple)) else [models]


def evaluate_nll(models, inputs, targets, mode="utvi", samples=None, seed=0, chunk=512):
    """Mean Gaussian NLL over the dataset, averaged over ensemble members.

    Predictions in the report are the member-averaged mean and variance.
    Each MCVI member gets its own stream derived from ``seed``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    members = _members(models)
    streams = np.random.SeedSequence(seed).spawn(len(members))
    nlls, means, vars_ = [], [], []
    for model, stream in zip(members, streams):
        m = resolve_mode(mode, samples, stream)
        mean, var = model.predict(inputs, m, chunk=chunk)
        nlls.append(float(np.mean(nll_per_node(mean, var, targets))))
        means.append(mean)
        vars_.append(var)
    m = resolve_mode(mode, samples)
    n = m.samples if m.kind == "mcvi" else 3
    return EvalReport(m.label, n, float(np.mean(nlls)), np.mean(means, axis=0), np.mean(vars_, axis=0))


def standardized_residuals(model, inputs, targets, mode="utvi"):
    mean, var = model.predict(inputs, resolve_mode(mode), chunk=1024)
    return (np.asarray(targets) - mean) / np.sqrt(var)


# -- localization maps ---------------------------------------------------------

def _grid_shape(count):
    """Most nearly square (nx, ny) with nx * ny == count and nx >= ny."""
    ny = math.isqrt(count)
    while count % ny:
        ny -= 1
    return count // ny, ny


def _cell_positions(sim, row, col, count, rng):
    """Emitter positions inside pixel (row, col); rows index y, columns index x.

    Without ``rng`` the positions form a midpoint grid, square whenever
    ``count`` is a perfect square.
    """
    x0 = col - sim.L / 2.0
    y0 = row - sim.L / 2.0
    if rng is None:
        nx, ny = _grid_shape(count)
        gx, gy = np.meshgrid((np.arange(nx) + 0.5) / nx, (np.arange(ny) + 0.5) / ny, indexing="xy")
        return np.column_stack([x0 + gx.ravel(), y0 + gy.ravel()])
    u = rng.uniform(0.0, 1.0, size=(count, 2))
    return np.column_stack([x0 + u[:, 0], y0 + u[:, 1]])


def crb_map(sim: SimParams = SimParams(), per_pixel_count=1024, rng=None):
    """sigma_b^2 / mean(in-frame photons) per pixel.

    Emitters sit on a midpoint grid when ``rng`` is None, otherwise they are
    drawn uniformly in the pixel.  The grid makes the map exactly symmetric
    for square counts.
    """
    out = np.empty((sim.L, sim.L))
    for row in range(sim.L):
        for col in range(sim.L):
            pos = _cell_positions(sim, row, col, per_pixel_count, rng)
            n_i = expected_photons(pos[:, 0], pos[:, 1], sim)
            out[row, col] = sim.sigma_b**2 / float(np.mean(n_i))
    return out


@dataclass
class VarianceMap:
    values: np.ndarray
    counts: np.ndarray

    def ring_means(self, width=1):
        """(mean over the outer ``width`` ring of cells, mean over the rest)."""
        inner = np.zeros(self.values.shape, dtype=bool)
        inner[width:-width, width:-width] = True
        return float(self.values[~inner].mean()), float(self.values[inner].mean())


def variance_map(models, sim: SimParams = SimParams(), per_pixel_count=1024, seed=0, mode="utvi",
                 chunk=1024) -> VarianceMap:
    """Mean predicted position variance for emitters placed uniformly in each pixel.

    Each cell draws positions and Poisson images from its own stream spawned
    from ``seed``; the per-cell value averages the x and y variances over
    emitters and ensemble members.
    """
    members = _members(models)
    streams = np.random.SeedSequence(seed).spawn(sim.L * sim.L)
    values = np.empty((sim.L, sim.L))
    for row in range(sim.L):
        for col in range(sim.L):
            rng = np.random.default_rng(streams[row * sim.L + col])
            pos = _cell_positions(sim, row, col, per_pixel_count, rng)
            images, _ = LocalizationSource.arrays(simulate_batch(rng, per_pixel_count, sim, pos))
            acc = 0.0
            for k, model in enumerate(members):
                m = resolve_mode(mode, None if mode != "mcvi" else 10, seed=(seed, row, col, k))
                _, var = model.predict(images, m, chunk=chunk)
                acc += float(np.mean(var[:, :2]))
            values[row, col] = acc / len(members)
    return VarianceMap(values, np.full((sim.L, sim.L), per_pixel_count, dtype=np.int64))


def rotation_asymmetry(values):
    """Largest relative change of any cell under a 90 degree rotation."""
    rot = np.rot90(values)
    return float(np.max(np.abs(rot - values) / np.abs(values)))


# -- sweeps --------------------------------------------------------------------

def timing_sweep(model, inputs, sample_counts, repeats=10, include=("utvi",), seed=0):
    """Median and IQR wall time (ms) of one forward pass per mode.

    Runs single-threaded; one warm-up pass per mode is discarded.  Every
    mode sees the same ``inputs``.
    """
    if repeats < 1:
        raise ParameterError("repeats must be >= 1")
    plan = [(k, None) for k in include] + [("mcvi", int(n)) for n in sample_counts]
    reports = []
    with threadpool_limits(limits=1):
        for kind, n in plan:
            mode = resolve_mode(kind, n, seed)
            model.predict(inputs, mode)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                model.predict(inputs, mode)
                times.append((time.perf_counter() - t0) * 1e3)
            q1, med, q3 = np.percentile(times, [25, 50, 75])
            reports.append(EvalReport(mode.label, n if n is not None else 3,
                                      median_ms=float(med), iqr_ms=float(q3 - q1)))
    return reports


@dataclass
class SweepRow:
    mode: str
    samples: int
    seed: int
    best_val_nll: float


def nll_vs_samples_sweep(build_model, source, base: TrainConfig, sample_grid, seeds,
                         include=("utvi", "smp"), on_row=None):
    """Train fresh models per (mode, samples, seed) and record best validation NLL."""
    plan = [(k, 3) for k in include] + [("mcvi", int(n)) for n in sample_grid]
    rows = []
    for kind, n in plan:
        for seed in seeds:
            cfg = TrainConfig.from_dict({**base.to_dict(), "mode": kind, "mc_samples": n, "seed": seed})
            res = train(build_model(), source, cfg)
            row = SweepRow(kind, n, seed, res.best_val_nll)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def median_by(rows, mode, samples=None):
    vals = [r.best_val_nll for r in rows if r.mode == mode and (samples is None or r.samples == samples)]
    return float(np.median(vals))


def heads_ablation(sizes, seeds, base: TrainConfig, sim: SimParams = SimParams(), data_seed=99,
                   on_row=None):
    """Best validation NLL with and without the inverse-CDF heads on small fixed datasets.

    Returns rows of (heads flag, dataset size, seed, best NLL).  Each size
    uses the first ``size`` emitters of one fixed simulated pool.
    """
    source = LocalizationSource(sim)
    pool_x, pool_y = source.batch(np.random.default_rng(data_seed), max(sizes))
    rows = []
    for size in sizes:
        data = FixedDataset(pool_x[:size], pool_y[:size], source)
        for heads in (True, False):
            for seed in seeds:
                cfg = TrainConfig.from_dict({**base.to_dict(), "seed": seed,
                                             "batch_size": min(base.batch_size, size)})
                res = train(build_localizer_model(sim, heads=heads), data, cfg)
                row = (heads, size, seed, res.best_val_nll)
                rows.append(row)
                if on_row is not None:
                    on_row(row)
    return rows


# -- files ---------------------------------------------------------------------

def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_nll_sweep_csv(path, rows):
    _write(path, NLL_SWEEP_HEADER, [[r.mode, r.samples, r.seed, f"{r.best_val_nll:.17g}"] for r in rows])


def write_timing_csv(path, reports, batch):
    _write(path, TIMING_HEADER, [[r.mode.split("@")[0], r.samples, batch, f"{r.median_ms:.6f}",
                                  f"{r.iqr_ms:.6f}"] for r in reports])


def write_map_csv(path, values, counts):
    rows = [[r, c, f"{values[r, c]:.17g}", int(counts[r, c])]
            for r in range(values.shape[0]) for c in range(values.shape[1])]
    _write(path, MAP_HEADER, rows)


def read_map_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    side = int(data[:, 0].max()) + 1
    values = np.zeros((side, side))
    counts = np.zeros((side, side), dtype=np.int64)
    for r, c, v, n in data:
        values[int(r), int(c)] = v
        counts[int(r), int(c)] = int(n)
    return values, counts


def heatmap_svg(values, title="", cell=40):
    """Grayscale heatmap with each cell's value written into it."""
    rows, cols = values.shape
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell + 20}">',
             f'<text x="2" y="14" font-size="12">{title}</text>']
    for r in range(rows):
        for c in range(cols):
            g = int(255 * (1.0 - (values[r, c] - lo) / span))
            y = 20 + r * cell
            parts.append(f'<rect x="{c * cell}" y="{y}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>')
            ink = "black" if g > 127 else "white"
            parts.append(f'<text x="{c * cell + 2}" y="{y + cell // 2}" font-size="8" fill="{ink}">'
                         f'{values[r, c]:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
