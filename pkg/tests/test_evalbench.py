import math

import mpmath
import numpy as np
import pytest

from utvi import evalbench
from utvi.datagen import SimParams
from utvi.errors import ParameterError
from utvi.layers import BayesianLinear, GaussianOutput, LeakyReLU, softplus_inv
from utvi.model import Model
from utvi.training import RegressionSource, build_localizer_model, build_regression_model


def identity_model():
    m = Model([BayesianLinear(1, 1)])
    m.params = {"0.weight_mean": np.array([[1.0]]), "0.weight_rho": np.array([[-800.0]]),
                "0.bias_mean": np.array([0.0]), "0.bias_rho": np.array([-800.0])}
    return m


def noisy_regression(seed=0, sigma=0.3):
    m = build_regression_model(hidden=16)
    m.init(np.random.default_rng(seed))
    for k in m.params:
        if k.endswith("_rho"):
            m.params[k] = np.full(m.params[k].shape, softplus_inv(sigma))
    return m


class TestEvaluateNLL:
    def test_perfect_predictor_hits_floor(self):
        x = np.linspace(-1, 2, 50)[:, None]
        rep = evalbench.evaluate_nll(identity_model(), x, x.copy())
        assert rep.nll == pytest.approx(0.5 * math.log(2 * math.pi * 1e-6), rel=1e-14)

    def test_identical_ensemble(self):
        m = noisy_regression()
        x, y = RegressionSource().validation(64, 1)
        single = evalbench.evaluate_nll(m, x, y)
        ens = evalbench.evaluate_nll([m, m.copy(), m.copy()], x, y)
        assert ens.nll == pytest.approx(single.nll, rel=1e-15)

    def test_empty_dataset(self):
        with pytest.raises(ParameterError):
            evalbench.evaluate_nll(identity_model(), np.zeros((0, 1)), np.zeros((0, 1)))

    def test_mcvi_needs_samples(self):
        with pytest.raises(ParameterError):
            evalbench.evaluate_nll(identity_model(), np.zeros((2, 1)), np.zeros((2, 1)), "mcvi")

    def test_samples_ignored_outside_mcvi(self):
        m = noisy_regression()
        x, y = RegressionSource().validation(64, 1)
        a = evalbench.evaluate_nll(m, x, y, "utvi")
        b = evalbench.evaluate_nll(m, x, y, "utvi", samples=77)
        assert a.nll == b.nll

    @pytest.mark.parametrize("mode", ["smp", "utvi"])
    def test_deterministic_modes_bitwise(self, mode):
        m = noisy_regression()
        x, y = RegressionSource().validation(128, 2)
        assert evalbench.evaluate_nll(m, x, y, mode).nll == evalbench.evaluate_nll(m, x, y, mode).nll

    def test_mcvi_spread_shrinks_with_samples(self):
        m = noisy_regression(sigma=0.5)
        x, y = RegressionSource().validation(256, 3)
        spread = []
        for n in (3, 32, 128):
            vals = [evalbench.evaluate_nll(m, x, y, "mcvi", n, seed=s).nll for s in range(8)]
            spread.append(np.var(vals, ddof=1))
        assert spread[0] > spread[1] > spread[2]


class TestCRB:
    sim = SimParams()

    def test_center_value(self):
        crb = evalbench.crb_map(self.sim, 1024)
        assert crb[3, 3] == pytest.approx(0.01103, abs=2e-5)

    def test_corner_cell_against_quadrature(self):
        mpmath.mp.dps = 20
        h, s = 4, 1.05
        frac = lambda c: mpmath.ncdf((h - c) / s) - mpmath.ncdf((-h - c) / s)
        # corner pixel spans [-4, -3] in both axes; the photon count factorizes
        mean_frac = mpmath.quad(frac, [-4, -3])
        n_corner = 100 * mean_frac**2
        crb = evalbench.crb_map(self.sim, 1024)
        # the pixel average sits well above the value 25 at the outer corner point
        assert float(n_corner) == pytest.approx(45.81, abs=0.01)
        assert crb[0, 0] == pytest.approx(1.05**2 / float(n_corner), rel=1e-3)
        assert crb[0, 0] > crb[3, 3]

    def test_rotation_symmetry(self):
        assert evalbench.rotation_asymmetry(evalbench.crb_map(self.sim, 256)) <= 1e-12

    def test_random_placement_close_to_grid(self):
        drawn = evalbench.crb_map(self.sim, 4096, np.random.default_rng(0))
        grid = evalbench.crb_map(self.sim, 4096)
        assert np.max(np.abs(drawn - grid) / grid) <= 0.01

    def test_converges_in_count(self):
        a = evalbench.crb_map(self.sim, 1024)
        b = evalbench.crb_map(self.sim, 2048)
        assert np.max(np.abs(a - b) / b) <= 0.01


class TestVarianceMap:
    def test_reproducible_and_shaped(self):
        m = build_localizer_model().init(np.random.default_rng(0))
        a = evalbench.variance_map(m, per_pixel_count=4, seed=5)
        b = evalbench.variance_map(m, per_pixel_count=4, seed=5)
        assert a.values.shape == (8, 8) and np.all(a.counts == 4)
        assert np.array_equal(a.values, b.values)
        assert np.all(a.values >= 0)

    def test_ring_means(self):
        v = np.ones((8, 8))
        v[1:-1, 1:-1] = 0.5
        edge, inner = evalbench.VarianceMap(v, np.ones((8, 8))).ring_means()
        assert (edge, inner) == (1.0, 0.5)


class TestTiming:
    def test_sweep_rows_and_ordering(self):
        m = build_regression_model()
        m.init(np.random.default_rng(0))
        x = np.linspace(-1, 2, 256)[:, None]
        reps = evalbench.timing_sweep(m, x, [3, 32, 128], repeats=10)
        assert [r.mode for r in reps] == ["utvi", "mcvi@3", "mcvi@32", "mcvi@128"]
        assert all(r.median_ms > 0 and r.iqr_ms >= 0 for r in reps)
        med = [r.median_ms for r in reps]
        assert med[1] <= med[2] <= med[3]
        assert 0.5 <= med[0] / med[1] <= 2.0


class TestFiles:
    def test_map_round_trip(self, tmp_path):
        v = np.arange(64.0).reshape(8, 8) / 7
        c = np.full((8, 8), 256)
        evalbench.write_map_csv(tmp_path / "m.csv", v, c)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "row,col,value,count" and len(lines) == 65
        v2, c2 = evalbench.read_map_csv(tmp_path / "m.csv")
        assert np.array_equal(v, v2) and np.array_equal(c, c2)

    def test_sweep_and_timing_headers(self, tmp_path):
        evalbench.write_nll_sweep_csv(tmp_path / "s.csv", [evalbench.SweepRow("utvi", 3, 0, -0.2)])
        assert (tmp_path / "s.csv").read_text().splitlines()[0] == "mode,samples,seed,best_val_nll"
        evalbench.write_timing_csv(tmp_path / "t.csv", [evalbench.EvalReport("mcvi@8", 8, median_ms=1.0, iqr_ms=0.1)], 1024)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "mode,samples,batch,median_ms,iqr_ms"
        assert lines[1].startswith("mcvi,8,1024,")

    def test_svg_embeds_values(self):
        svg = evalbench.heatmap_svg(np.array([[0.5, 0.25], [1.0, 2.0]]), "t")
        assert svg.startswith("<svg") and ">0.25<" in svg


@pytest.mark.slow
def test_trained_model_is_calibrated(trained_regression):
    x, y = RegressionSource().validation(10_000, 77)
    z = evalbench.standardized_residuals(trained_regression, x, y)
    assert 0.8 <= np.var(z) <= 1.2
