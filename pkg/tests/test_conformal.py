import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mopjci.conformal import (ConformalCalibration, band_samples, conformal_offset, conformal_quantile_index,
                              conformal_rank, fit_and_band, ite_interval, per_regressor_miscoverage,
                              recalibrate_subgroup, scqr_calibrate, scr_calibrate)
from mopjci.core import ExperimentConfig, Interval, RngStream, TrialDataset
from mopjci.forest import ForestHyperparams

SMALL_RF = ForestHyperparams(n_estimators=20)
SMALL_QRF = ForestHyperparams(n_estimators=20)


def _rank_oracle(n, alpha):
    # exact rational arithmetic for (1 - alpha)(1 + 1/n) * n
    from fractions import Fraction
    a = Fraction(alpha).limit_denominator(10**6)
    return min(math.ceil((1 - a) * (n + 1)), n)


def test_quantile_index_examples():
    assert conformal_quantile_index(100, 0.1) == pytest.approx(0.909)
    assert conformal_rank(100, 0.1) == 91
    assert conformal_quantile_index(4, 0.5) == pytest.approx(0.625)
    assert conformal_rank(4, 0.5) == 3
    assert conformal_quantile_index(2, 0.05) > 1
    assert conformal_rank(2, 0.05) == 2


@pytest.mark.parametrize("n", [1, 2, 3, 7, 19, 20, 39, 40, 75, 150])
@pytest.mark.parametrize("alpha", [0.025, 0.05, 0.1, 0.2, 0.25, 0.5])
def test_rank_matches_exact_arithmetic(n, alpha):
    assert conformal_rank(n, alpha) == _rank_oracle(n, alpha)


def test_scr_examples():
    const = lambda X: np.zeros(len(X))  # noqa: E731
    X = np.zeros((4, 1))
    assert scr_calibrate(const, X, [1.0, -2.0, 3.0, 4.0], 0.5) == 3.0
    assert scr_calibrate(const, X, np.zeros(4), 0.5) == 0.0
    assert scr_calibrate(const, X, np.full(4, 2.5), 0.1) == 2.5
    with pytest.raises(ValueError, match="empty"):
        scr_calibrate(const, np.zeros((0, 1)), [], 0.1)


def test_scqr_examples():
    X = np.zeros((4, 1))
    y = np.array([1.0, 2.0, 3.0, 4.0])
    # y on the upper quantile everywhere: all scores 0
    assert scqr_calibrate(y - 5, y, X, y, 0.1) == 0.0
    # scores {-1, -1, 2, 3} at alpha = 0.5 -> 3rd smallest
    lo = np.array([0.0, 1.0, 5.0, 0.0])
    hi = np.array([2.0, 3.0, 6.0, 1.0])
    assert scqr_calibrate(lo, hi, X, y, 0.5) == 2.0
    # strictly inside by margin 0.5 -> negative offset
    assert scqr_calibrate(y - 1, y + 0.5, X, y, 0.1) == -0.5


def test_ite_interval_examples():
    assert ite_interval(Interval(1, 3), Interval(0, 1)) == Interval(0, 3)
    assert ite_interval(Interval(2, 5), Interval(2, 5)) == Interval(-3, 3)
    assert ite_interval(Interval(2, 2), Interval(1, 1)) == Interval(1, 1)


@given(st.floats(-1e6, 1e6), st.floats(0, 1e6), st.floats(-1e6, 1e6), st.floats(0, 1e6))
def test_ite_width_additivity(a, wa, b, wb):
    t, c = Interval(a, a + wa), Interval(b, b + wb)
    assert ite_interval(t, c).width == pytest.approx(t.width + c.width, rel=1e-9, abs=1e-6)


def test_per_regressor_miscoverage():
    assert per_regressor_miscoverage(0.1, 2) == 0.025
    assert per_regressor_miscoverage(0.1, 1) == 0.05
    assert per_regressor_miscoverage(0.2, 4) == 0.025
    with pytest.raises(ValueError):
        per_regressor_miscoverage(1.2, 2)


def _trial(n=120, d=2, seed=0, noise=1.0):
    gen = np.random.default_rng(seed)
    X = gen.uniform(-2, 2, size=(n, 2))
    t = np.tile([0.0, 1.0], n // 2)
    tau = np.column_stack([X[:, 0] * (k + 1) for k in range(d)])
    mu0 = np.column_stack([X[:, 1]] * d)
    Y = mu0 + t[:, None] * tau + noise * gen.normal(size=(n, d))
    return TrialDataset(X, ("a", "b"), t, Y, tuple(f"y{k}" for k in range(d)), tau)


@pytest.mark.parametrize("estimator", ["rf_scr", "qrf_scqr"])
def test_fit_and_band_structure(estimator):
    ds = _trial()
    cfg = ExperimentConfig(estimator=estimator)
    calib, bands, val = fit_and_band(ds, cfg, RngStream(0), SMALL_RF, SMALL_QRF)
    assert bands.point.shape == (60, 2) and val.size == 60
    assert calib.levels == {"w": 0.025, "v": 0.2}
    assert set(calib.offsets) == {(k, a, b) for k in range(2) for a in (0, 1) for b in ("w", "v")}
    assert np.all(bands.w_lo <= bands.w_hi) and np.all(bands.v_lo <= bands.v_hi)
    if estimator == "qrf_scqr":
        assert calib.quantile_levels["w"] == (0.0125, 0.9875)
    else:
        assert np.all(np.array(list(calib.offsets.values())) >= 0)
    again = fit_and_band(ds, cfg, RngStream(0), SMALL_RF, SMALL_QRF)[1]
    assert np.array_equal(again.w_lo, bands.w_lo)


def test_zero_residuals_collapse_bands():
    gen = np.random.default_rng(0)
    X = gen.uniform(size=(40, 1))
    t = np.tile([0.0, 1.0], 20)
    Y = (2.0 * t)[:, None]
    ds = TrialDataset(X, ("a",), t, Y, ("y0",), np.full((40, 1), 2.0))
    calib, bands, _ = fit_and_band(ds, ExperimentConfig(outcome_weights=(1.0,)), 0, SMALL_RF)
    assert np.all(bands.w_lo == bands.point) and np.all(bands.w_hi == bands.point)
    assert np.all(bands.v_lo == bands.w_lo) and np.all(bands.point == 2.0)


def test_outcome_swap_permutes_columns():
    ds = _trial()
    calib, _, _ = fit_and_band(ds, ExperimentConfig(), RngStream(2), SMALL_RF)
    sub = calib.select_outcomes([1, 0])
    X = ds.covariates[:5]
    assert np.array_equal(band_samples(sub, X).w_lo, band_samples(calib, X).w_lo[:, [1, 0]])


def test_recalibrate_full_set_equals_global():
    ds = _trial()
    calib, _, val = fit_and_band(ds, ExperimentConfig(), RngStream(1), SMALL_RF)
    assert recalibrate_subgroup(calib, np.arange(val.size)) == calib.offsets


def test_recalibrate_local_scores():
    scores = np.array([[1.0], [2.0], [3.0], [4.0]])
    calib = ConformalCalibration("scr", {}, {"w": 0.5, "v": 0.5}, {}, np.arange(4), np.array([0, 1, 0, 1]),
                                 {"w": scores, "v": scores})
    q = recalibrate_subgroup(calib, [0, 1, 2, 3])
    # two scores per arm: rank ceil(0.5 * 1.5 * 2) = 2
    assert q[(0, 0, "w")] == 3.0 and q[(0, 1, "w")] == 4.0
    assert conformal_offset([1.0, 2.0], 0.5) == 2.0
    with pytest.raises(ValueError, match="arm 1"):
        recalibrate_subgroup(calib, [0, 2])
    with pytest.raises(ValueError, match="SCR"):
        recalibrate_subgroup(ConformalCalibration("scqr", {}, {}, {}, np.arange(4), np.zeros(4), {}), [0])


def test_band_nesting_on_validation():
    for est in ("rf_scr", "qrf_scqr"):
        _, bands, _ = fit_and_band(_trial(seed=3), ExperimentConfig(estimator=est), 0, SMALL_RF, SMALL_QRF)
        assert np.all(bands.w_lo <= bands.v_lo) and np.all(bands.w_hi >= bands.v_hi)


def test_constant_predictor_still_valid():
    # distribution-free: a useless regressor still covers at the nominal rate
    gen = np.random.default_rng(0)
    cover = []
    for r in range(30):
        y = gen.standard_t(3, size=400)
        const = lambda X: np.full(len(X), 0.7)  # noqa: E731
        Q = scr_calibrate(const, np.zeros((200, 1)), y[:200], 0.1)
        cover.append(np.mean(np.abs(y[200:] - 0.7) <= Q))
    assert np.mean(cover) >= 0.9 - 0.03


class _FixedQuantiles:
    """Quantile model returning q - 0.5 shifted by a per-level spread."""

    def __init__(self, spread):
        self.spread = spread

    def predict(self, X, quantiles=None):
        qs = np.atleast_1d(quantiles)
        out = np.array([[self.spread * (q - 0.5) for q in qs]] * len(X))
        return out[:, 0] if np.ndim(quantiles) == 0 else out


def test_scqr_w_band_contains_v_band_despite_offsets():
    # w offsets far more negative than v offsets would put w inside v
    models = {(0, a): _FixedQuantiles(1.0) for a in (0, 1)}
    offsets = {(0, a, "w"): -0.6 for a in (0, 1)} | {(0, a, "v"): 0.0 for a in (0, 1)}
    calib = ConformalCalibration("scqr", models, {"w": 0.025, "v": 0.2}, offsets, np.arange(2),
                                 np.array([0, 1]), {"w": np.zeros((2, 1)), "v": np.zeros((2, 1))},
                                 {"w": (0.0125, 0.9875), "v": (0.1, 0.9)})
    b = band_samples(calib, np.zeros((3, 1)))
    assert np.all(b.w_lo <= b.v_lo) and np.all(b.v_hi <= b.w_hi)
    assert np.allclose(b.v_hi - b.v_lo, 1.6)
    assert np.allclose(b.w_hi - b.w_lo, 1.6)  # the hull equals v here
