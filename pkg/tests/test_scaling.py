import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import curve_fit

from matformer.errors import FitError
from matformer.scaling import (
    REFERENCE_FITS,
    ScalingFit,
    ScalingPoint,
    constant_rmse,
    eval_scaling,
    fit_power_law,
    read_points_csv,
    write_fit_json,
    write_points_csv,
)

TRUE = ScalingFit(2.0, -0.5, 1.0)


def grid_points(fit=TRUE, noise=0.0, seed=0, n=8, hi=1e2):
    rng = np.random.default_rng(seed)
    pts = []
    for N in np.geomspace(1, hi, n):
        for D in np.geomspace(1, hi, n):
            loss = float(eval_scaling(fit, N, D)) * (1 + noise * rng.normal())
            pts.append(ScalingPoint(N, D, loss))
    return pts


def rel_err(fit, ref):
    return max(abs(fit.a - ref.a) / abs(ref.a), abs(fit.b - ref.b) / abs(ref.b), abs(fit.c - ref.c) / abs(ref.c))


class TestEval:
    def test_flat_exponent(self):
        fit = ScalingFit(3.0, 0.0, 0.5)
        np.testing.assert_allclose(eval_scaling(fit, [1, 10, 1e6], [5, 1e3, 7]), 3.5)

    @settings(max_examples=50)
    @given(st.floats(0.1, 100), st.floats(-2, -0.01), st.floats(0, 5))
    def test_monotone_decreasing(self, a, b, c):
        x = np.geomspace(1, 1e9, 30)
        y = eval_scaling(ScalingFit(a, b, c), x, 1.0)
        # strict in exact arithmetic; float rounding can flatten the far tail
        assert np.all(np.diff(y) <= 0)
        assert y[0] > y[-1]

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            eval_scaling(TRUE, 0, 1)

    def test_reference_constants(self):
        assert REFERENCE_FITS["baseline"] == ScalingFit(14.08, -0.10, 0.89)
        assert REFERENCE_FITS["matformer"] == ScalingFit(21.60, -0.13, 1.33)


class TestFit:
    def test_noiseless_recovery(self):
        pts = grid_points()
        fit = fit_power_law(pts)
        assert rel_err(fit, TRUE) < 1e-6
        pred = eval_scaling(fit, [p.N for p in pts], [p.D for p in pts])
        np.testing.assert_allclose(pred, [p.loss for p in pts], rtol=1e-5)

    @pytest.mark.parametrize("true", [ScalingFit(14.08, -0.10, 0.89), ScalingFit(21.6, -0.13, 1.33), ScalingFit(5.0, -0.3, 2.0)])
    def test_noiseless_realistic_scale(self, true):
        pts = [ScalingPoint(N, D, float(eval_scaling(true, N, D))) for N in np.geomspace(1e4, 1e6, 5) for D in np.geomspace(1e5, 1e8, 5)]
        assert rel_err(fit_power_law(pts), true) < 1e-6

    @pytest.mark.parametrize("seed", range(10))
    def test_noisy_recovery(self, seed):
        fit = fit_power_law(grid_points(noise=0.01, seed=seed))
        assert rel_err(fit, TRUE) < 0.05

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scipy(self, seed):
        pts = grid_points(noise=0.01, seed=seed)
        x = np.array([p.N * p.D for p in pts])
        y = np.array([p.loss for p in pts])
        popt, _ = curve_fit(lambda x, a, b, c: a * x**b + c, x, y, p0=(1.0, -0.3, 0.5), maxfev=20000)
        fit = fit_power_law(pts)
        np.testing.assert_allclose([fit.a, fit.b, fit.c], popt, rtol=1e-5)

    def test_constant_losses(self):
        pts = [ScalingPoint(N, 10.0, 2.5) for N in (1, 2, 4, 8, 16)]
        fit = fit_power_law(pts)
        assert fit.rmse < 1e-9
        pred = eval_scaling(fit, [p.N for p in pts], [p.D for p in pts])
        np.testing.assert_allclose(pred, 2.5, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(1, 1e6), st.floats(1, 1e6), st.floats(0.1, 10)), min_size=4, max_size=25))
    def test_never_worse_than_constant(self, rows):
        pts = [ScalingPoint(*r) for r in rows]
        if len({p.N * p.D for p in pts}) < 4:
            with pytest.raises(FitError):
                fit_power_law(pts)
            return
        assert fit_power_law(pts).rmse <= constant_rmse(pts) + 1e-12

    def test_too_few_points(self):
        with pytest.raises(FitError):
            fit_power_law([ScalingPoint(1, 1, 1.0), ScalingPoint(2, 1, 0.9), ScalingPoint(1, 2, 0.9)])

    def test_point_validation(self):
        with pytest.raises(ValueError):
            ScalingPoint(0, 1, 1)


def test_csv_and_json_round_trip(tmp_path):
    pts = grid_points(n=3)
    write_points_csv(tmp_path / "pts.csv", pts)
    assert (tmp_path / "pts.csv").read_text().splitlines()[0] == "N,D,loss"
    assert read_points_csv(tmp_path / "pts.csv") == pts
    fit = fit_power_law(grid_points())
    write_fit_json(tmp_path / "fit.json", fit)
    data = json.loads((tmp_path / "fit.json").read_text())
    assert set(data) == {"a", "b", "c", "rmse"}
    assert data["b"] == fit.b


def test_csv_bad_header(tmp_path):
    (tmp_path / "bad.csv").write_text("x,y\n1,2\n")
    with pytest.raises(ValueError):
        read_points_csv(tmp_path / "bad.csv")
