"""Acceptance suite: one test per numbered criterion, each printing a PASS/FAIL line.

The desk-scale experiments (criteria 5, 6, 9, 10) train dozens of models and
take a few hours on one core in total.  The verdict lines are repeated in the
pytest terminal summary under "acceptance criteria".
"""
import math
import time

import numpy as np
import pytest

import gradcheck
from test_layers import MU_GRID, SIGMA_GRID, SLOPE_GRID, n_i_oracle, quad_moments
from utvi import autodiff as ad
from utvi import evalbench
from utvi.datagen import SimParams, expected_image, ground_truth_nll
from utvi.layers import PropagationMode, leaky_relu_smp, photon_prior_nodes
from utvi.moments import GaussianTensor, independent_product_moments, make_sigma_points, ut_propagate
from utvi.training import (
    Checkpoint, LocalizationSource, RegressionSource, TrainConfig, build_localizer_model,
    build_regression_model, train,
)

SEEDS = (0, 1, 2)
MC_GRID = (3, 8, 32, 128)


def desk_config(mode, seed, samples=3, batches_per_epoch=100, val_size=1024):
    """M=50 epochs of 128-sample batches."""
    return TrainConfig(mode=mode, mc_samples=samples, seed=seed, epochs=50, batches_per_epoch=batches_per_epoch,
                       batch_size=128, val_size=val_size, record_wall_time=False)


# Regression NLLs are compared with a population value; a 1024-point validation
# set alone carries ~0.026 nats of standard error, 8192 points cut that to ~0.009.
REGRESSION_VAL_SIZE = 8192


# The localizer sits on a high-variance plateau for the first ~5000 steps; 400
# batches per epoch lets it converge while three seeds still fit in under an hour.
LOCALIZER_BATCHES = 400


# -- 1-3: moment machinery -------------------------------------------------------

def test_criterion_01_sigma_points(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(1000):
        mu = rng.uniform(-10, 10)
        var = 10 ** rng.uniform(-4, 2)
        kappa = rng.uniform(0.05, 10)
        sp = make_sigma_points(mu, var, kappa)
        w, x = np.array(sp.weights), np.array(sp.points)
        mean = float(w @ x)
        worst = max(worst,
                    abs(w.sum() - 1.0),
                    abs(mean - mu) / max(abs(mu), math.sqrt(var)),
                    abs(float(w @ (x - mu) ** 2) - var) / var)
    mu = rng.uniform(-3, 3, size=1000)
    var = 10 ** rng.uniform(-3, 1, size=1000)
    raw = [mu, mu**2 + var, mu**3 + 3 * mu * var, mu**4 + 6 * mu**2 * var + 3 * var**2]
    poly_worst = 0.0
    for p in range(1, 5):
        out = ut_propagate(GaussianTensor(mu, var), lambda t, p=p: t**p, 2.0)
        # relative to the natural scale (|mu| + sigma)^p so moments crossing zero stay meaningful
        scale = (np.abs(mu) + np.sqrt(var)) ** p
        poly_worst = max(poly_worst, float(np.max(np.abs(out.mean - raw[p - 1]) / scale)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and poly_worst <= 1e-10 and elapsed < 1.0
    verdict(1, ok, f"identity err {worst:.2e} (<=1e-12), x^1..x^4 err {poly_worst:.2e} (<=1e-10), "
                   f"{elapsed:.2f}s (<1s)")


def test_criterion_02_product_rule_monte_carlo(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    n = 10_000_000
    worst = 0.0
    for _ in range(20):
        # coefficient of variation <= 1 per factor keeps the MC error well under the tolerance
        mx, my = rng.choice([-1, 1], 2) * rng.uniform(0.5, 2.0, 2)
        vx, vy = rng.uniform(0.05, 1.0, 2) * np.array([mx, my]) ** 2
        prod = (mx + math.sqrt(vx) * rng.standard_normal(n)) * (my + math.sqrt(vy) * rng.standard_normal(n))
        out = independent_product_moments(GaussianTensor(np.array([mx]), np.array([vx])),
                                          GaussianTensor(np.array([my]), np.array([vy])))
        worst = max(worst, abs(prod.mean() - out.mean[0]) / abs(out.mean[0]),
                    abs(prod.var() - out.variance[0]) / out.variance[0])
        del prod
    elapsed = time.perf_counter() - t0
    # t significant figures: relative error <= 5 * 10^-t
    ok = worst <= 5e-3 and elapsed < 60
    verdict(2, ok, f"worst relative error {worst:.2e} (<=5e-3, 3 s.f.), {elapsed:.1f}s (<60s)")


def test_criterion_03_smp_leaky_relu_quadrature(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for a in SLOPE_GRID:
        for sigma in SIGMA_GRID:
            mus = np.asarray(MU_GRID)
            out = leaky_relu_smp(GaussianTensor(mus, np.full(mus.shape, sigma**2)), a)
            for j, mu in enumerate(mus):
                qm, qv = quad_moments(mu, sigma, a)
                worst = max(worst, abs(out.mean[j] - qm), abs(out.variance[j] - qv))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10
    verdict(3, ok, f"worst abs error {worst:.2e} over {len(MU_GRID) * 12} grid points (<=1e-6), "
                   f"{elapsed:.1f}s (<10s)")


# -- 4: gradients ------------------------------------------------------------------

def test_criterion_04_gradient_checks(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    worst, where = 0.0, None
    archs = {"regression": (build_regression_model, RegressionSource()),
             "localizer": (build_localizer_model, LocalizationSource())}
    for arch, (build, source) in archs.items():
        model = build()
        for kind in ("smp", "utvi", "mcvi"):
            for trial in range(5):
                params = gradcheck.randomize(model, rng)
                batch = source.batch(rng, 8)
                err = gradcheck.check(model, params, batch, gradcheck.mode_factory(kind, seed=trial), rng,
                                      per_tensor=4)
                if err > worst:
                    worst, where = err, (arch, kind, trial)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 120
    verdict(4, ok, f"worst relative error {worst:.2e} at {where} over 2 archs x 3 modes x 5 inits "
                   f"(<=1e-4), {elapsed:.0f}s (<120s)")


# -- 5-7: regression ------------------------------------------------------------------

@pytest.fixture(scope="module")
def regression_runs():
    """Best validation NLL per (mode, samples, seed), trained on demand and shared."""
    cache = {}

    def best(mode, seed, samples=3):
        key = (mode, samples if mode == "mcvi" else 3, seed)
        if key not in cache:
            cfg = desk_config(mode, seed, key[1], val_size=REGRESSION_VAL_SIZE)
            res = train(build_regression_model(), RegressionSource(), cfg)
            cache[key] = res.best_val_nll
            print(f"  regression {mode}@{key[1]} seed {seed}: best val NLL {res.best_val_nll:.5f}")
        return cache[key]

    def median(mode, samples=3):
        return float(np.median([best(mode, s, samples) for s in SEEDS]))

    return median


def test_criterion_05_regression_end_to_end(verdict, regression_runs):
    utvi = regression_runs("utvi")
    smp = regression_runs("smp")
    mcvi = regression_runs("mcvi", 3)
    truth = ground_truth_nll()
    checks = {
        "UTVI <= MCVI@3 - 0.02": utvi <= mcvi - 0.02,
        "|UTVI - SMP| <= 0.05": abs(utvi - smp) <= 0.05,
        "|UTVI - truth| <= 0.1": abs(utvi - truth) <= 0.1,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(5, not failed, f"medians UTVI {utvi:.4f}, SMP {smp:.4f}, MCVI@3 {mcvi:.4f}, truth {truth:.4f}"
                           + (f"; failed: {', '.join(failed)}" if failed else ""))


def test_criterion_06_mcvi_sample_sweep(verdict, regression_runs):
    utvi = regression_runs("utvi")
    medians = [regression_runs("mcvi", n) for n in MC_GRID]
    nonincreasing = all(b <= a for a, b in zip(medians, medians[1:]))
    reached = [n for n, m in zip(MC_GRID, medians) if m <= utvi + 0.05]
    first = reached[0] if reached else None
    ok = nonincreasing and first is not None and first >= 32
    table = ", ".join(f"@{n} {m:.4f}" for n, m in zip(MC_GRID, medians))
    verdict(6, ok, f"MCVI medians {table}; UTVI {utvi:.4f}; nonincreasing={nonincreasing}, "
                   f"first n within 0.05 of UTVI = {first} (needs >= 32)")


def test_criterion_07_runtime(verdict):
    model = build_regression_model().init(np.random.default_rng(0))
    x, _ = RegressionSource().batch(np.random.default_rng(1), 1024)
    reps = evalbench.timing_sweep(model, x, [128], repeats=10)
    utvi, mc128 = reps[0].median_ms, reps[1].median_ms
    verdict(7, utvi <= mc128 / 5, f"UTVI {utvi:.2f} ms vs MCVI@128 {mc128:.2f} ms median over 10 repeats, "
                                  f"ratio {mc128 / utvi:.1f}x (needs >= 5x)")


# -- 8-10: localization --------------------------------------------------------------

def test_criterion_08_photon_head(verdict):
    t0 = time.perf_counter()
    sim = SimParams()
    pos = np.random.default_rng(808).uniform(-4, 4, size=(100, 2))
    n_i = ad.value_of(photon_prior_nodes(ad.constant(pos), sim))
    sums = np.array([expected_image(r, sim).sum() for r in pos])
    sum_err = float(np.max(np.abs(n_i - sums)))
    named = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0]])
    got = ad.value_of(photon_prior_nodes(ad.constant(named), sim))
    oracle = np.array([float(n_i_oracle(x, y, sim)) for x, y in named])
    oracle_err = float(np.max(np.abs(got - oracle) / oracle))
    approx_ok = np.allclose(got, [99.97, 50.0, 25.0], atol=0.01)
    elapsed = time.perf_counter() - t0
    ok = sum_err <= 1e-10 and oracle_err <= 1e-12 and approx_ok and elapsed < 1.0
    verdict(8, ok, f"image-sum err {sum_err:.1e} (<=1e-10), center/edge/corner "
                   f"{got[0]:.2f}/{got[1]:.2f}/{got[2]:.2f}, oracle rel err {oracle_err:.1e}, {elapsed:.2f}s")


def test_criterion_09_localization_variance_map(verdict):
    sim = SimParams()
    models = []
    for seed in SEEDS:
        cfg = desk_config("utvi", seed, batches_per_epoch=LOCALIZER_BATCHES)
        res = train(build_localizer_model(sim), LocalizationSource(sim), cfg)
        print(f"  localizer utvi seed {seed}: best val NLL {res.best_val_nll:.4f}")
        models.append(res.best.model())
    vmap = evalbench.variance_map(models, sim, per_pixel_count=256, seed=9)
    edge, interior = vmap.ring_means()
    crb = evalbench.crb_map(sim, 256)
    _, crb_interior = evalbench.VarianceMap(crb, vmap.counts).ring_means()
    asym = evalbench.rotation_asymmetry(crb)
    checks = {
        "edge >= 1.5x interior": edge >= 1.5 * interior,
        "interior within 3x of CRB": crb_interior / 3 <= interior <= 3 * crb_interior,
        "CRB rotation symmetric to 1%": asym <= 0.01,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(9, not failed, f"edge {edge:.4f}, interior {interior:.4f} (ratio {edge / interior:.2f}), "
                           f"CRB interior {crb_interior:.4f}, CRB center {crb[sim.L // 2, sim.L // 2]:.4f}, "
                           f"rotation asym {asym:.1e}" + (f"; failed: {', '.join(failed)}" if failed else ""))


def test_criterion_10_heads_ablation(verdict):
    base = TrainConfig(mode="utvi", epochs=50, batches_per_epoch=100, batch_size=128, record_wall_time=False)
    rows = evalbench.heads_ablation([2**5, 2**7, 2**9], SEEDS, base,
                                    on_row=lambda r: print(f"  heads={r[0]} size {r[1]} seed {r[2]}: {r[3]:.4f}"))

    def med(heads, size):
        return float(np.median([r[3] for r in rows if r[0] == heads and r[1] == size]))

    report = "; ".join(f"2^{int(math.log2(s))} with {med(True, s):.3f} without {med(False, s):.3f}"
                       for s in (2**7, 2**9))
    with_h, without = med(True, 2**5), med(False, 2**5)
    verdict(10, with_h < without, f"size 2^5 median NLL with heads {with_h:.3f} vs without {without:.3f}; "
                                  f"reported only: {report}")


# -- 11: determinism ---------------------------------------------------------------

def test_criterion_11_determinism(verdict):
    problems = []
    sim = SimParams()
    setups = {"regression": (build_regression_model, RegressionSource()),
              "localizer": (lambda: build_localizer_model(sim), LocalizationSource(sim))}
    for arch, (build, source) in setups.items():
        x, y = source.validation(256, 5)
        for mode in ("smp", "utvi"):
            cfg = TrainConfig(mode=mode, seed=3, epochs=3, batches_per_epoch=5, batch_size=32, val_size=128,
                              record_wall_time=False)
            a, b = train(build(), source, cfg), train(build(), source, cfg)
            if a.log_csv() != b.log_csv():
                problems.append(f"{arch}/{mode} log")
            for which in ("best", "final"):
                ta, tb = getattr(a, which).to_json(), getattr(b, which).to_json()
                if ta != tb:
                    problems.append(f"{arch}/{mode} {which} checkpoint")
                if Checkpoint.from_json(ta).to_json() != ta:
                    problems.append(f"{arch}/{mode} {which} round-trip")
            loaded = Checkpoint.from_json(a.best.to_json()).model()
            if not all(np.array_equal(loaded.params[k], a.best.params[k]) for k in a.best.params):
                problems.append(f"{arch}/{mode} params round-trip")
            ea = evalbench.evaluate_nll(a.best.model(), x, y, mode)
            eb = evalbench.evaluate_nll(loaded, x, y, mode)
            if not (ea.nll == eb.nll and np.array_equal(ea.var, eb.var)):
                problems.append(f"{arch}/{mode} evaluation")
    verdict(11, not problems, "training logs, checkpoints, round-trips and evaluation bitwise identical"
            if not problems else f"mismatches: {', '.join(problems)}")
