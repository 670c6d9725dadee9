"""Split conformal intervals (SCR, SCQR) and joint ITE bands for several outcomes.

Every (outcome, arm) regressor is calibrated at miscoverage ``alpha / (2 d)``
so that the treated-minus-control intervals of all ``d`` outcomes cover
simultaneously with probability at least ``1 - alpha``.  Two bands are built
per sample: the wide *W* band at the overall level ``alpha`` and the narrow
*V* band at ``alpha_v``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ExperimentConfig, Interval, TrialDataset, as_stream, split_indices, validate_dataset
from .forest import DEFAULT_QRF, MEAN, QUANTILE, SYNTHETIC_RF, ForestHyperparams, fit_forest

log = logging.getLogger(__name__)

SCR = "scr"
SCQR = "scqr"
BANDS = ("w", "v")


def conformal_quantile_index(n_val: int, alpha: float) -> float:
    """Quantile level ``(1 - alpha)(1 + 1/n_val)``; may exceed 1."""
    return (1.0 - alpha) * (1.0 + 1.0 / n_val)


def conformal_rank(n_val: int, alpha: float) -> int:
    """1-based order statistic used as the conformal offset, clamped to ``n_val``."""
    if n_val < 1:
        raise ValueError("empty calibration set")
    level = conformal_quantile_index(n_val, alpha)
    # (1-a)(n+1) is often an integer up to rounding; don't let 4.0000000001 become 5
    k = math.ceil(level * n_val - 1e-9)
    return min(max(k, 1), n_val)


def conformal_offset(scores, alpha: float) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("empty validation set")
    k = conformal_rank(scores.size, alpha)
    return float(np.partition(scores, k - 1)[k - 1])


def _predict(model, X):
    return model(X) if callable(model) and not hasattr(model, "predict") else model.predict(X)


def scr_calibrate(model, X_val, y_val, alpha: float) -> float:
    """Offset for ``[mu(x) - Q, mu(x) + Q]`` from absolute validation residuals."""
    y_val = np.asarray(y_val, dtype=np.float64).ravel()
    if y_val.size == 0:
        raise ValueError("empty validation set")
    return conformal_offset(np.abs(y_val - _predict(model, X_val)), alpha)


def cqr_scores(lo, hi, y):
    return np.maximum(np.asarray(lo) - y, y - np.asarray(hi))


def scqr_calibrate(q_lo, q_hi, X_val, y_val, alpha: float) -> float:
    """Offset for ``[q_lo(x) - Q, q_hi(x) + Q]``.

    ``q_lo``/``q_hi`` are callables or arrays of predictions at ``X_val``.
    The offset is negative when every point sits inside the quantile band.
    """
    y_val = np.asarray(y_val, dtype=np.float64).ravel()
    if y_val.size == 0:
        raise ValueError("empty validation set")
    lo = q_lo(X_val) if callable(q_lo) else np.asarray(q_lo)
    hi = q_hi(X_val) if callable(q_hi) else np.asarray(q_hi)
    return conformal_offset(cqr_scores(lo, hi, y_val), alpha)


def ite_interval(treated: Interval, control: Interval) -> Interval:
    return Interval(treated.lo - control.hi, treated.hi - control.lo)


def per_regressor_miscoverage(alpha: float, d: int) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if d < 1:
        raise ValueError("d must be a positive integer")
    return alpha / (2 * d)


@dataclass(frozen=True, eq=False)
class IteBands:
    """Point ITE estimates and W/V intervals, arrays of shape ``(n, d)``."""

    point: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray
    v_lo: np.ndarray
    v_hi: np.ndarray
    crossings: int = 0

    @property
    def n(self):
        return self.point.shape[0]

    @property
    def d(self):
        return self.point.shape[1]

    @property
    def w_width(self):
        return self.w_hi - self.w_lo

    def w_band(self, i, k) -> Interval:
        return Interval(self.w_lo[i, k], self.w_hi[i, k])

    def v_band(self, i, k) -> Interval:
        return Interval(self.v_lo[i, k], self.v_hi[i, k])

    def subset(self, idx) -> "IteBands":
        return IteBands(self.point[idx], self.w_lo[idx], self.w_hi[idx],
                        self.v_lo[idx], self.v_hi[idx], self.crossings)

    def select_outcomes(self, ks) -> "IteBands":
        ks = list(ks)
        return IteBands(self.point[:, ks], self.w_lo[:, ks], self.w_hi[:, ks],
                        self.v_lo[:, ks], self.v_hi[:, ks], self.crossings)


@dataclass(frozen=True, eq=False)
class ConformalCalibration:
    """Fitted arm regressors and their conformal offsets.

    ``offsets[(k, arm, band)]`` is the global offset of outcome ``k``'s
    ``arm`` regressor for band ``"w"`` or ``"v"``.  ``val_scores[band]`` holds,
    for each validation sample, the score of its own arm's regressor, which
    is what subgroup recalibration needs.
    """

    method: str
    models: dict
    levels: dict
    offsets: dict
    val_index: np.ndarray
    val_treatment: np.ndarray
    val_scores: dict
    quantile_levels: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.val_scores["w"].shape[1]

    def select_outcomes(self, ks) -> "ConformalCalibration":
        ks = list(ks)
        return ConformalCalibration(
            self.method,
            {(j, a): self.models[(k, a)] for j, k in enumerate(ks) for a in (0, 1)},
            dict(self.levels),
            {(j, a, b): self.offsets[(k, a, b)] for j, k in enumerate(ks) for a in (0, 1) for b in BANDS},
            self.val_index,
            self.val_treatment,
            {b: s[:, ks] for b, s in self.val_scores.items()},
            dict(self.quantile_levels),
        )


def _arm_intervals(calib, X, k, arm, band, offsets):
    model = calib.models[(k, arm)]
    Q = offsets[(k, arm, band)]
    if calib.method == SCR:
        mu = model.predict(X)
        return mu - Q, mu + Q
    qlo, qhi = calib.quantile_levels[band]
    pred = model.predict(X, quantiles=[qlo, qhi])
    return pred[:, 0] - Q, pred[:, 1] + Q


def _point(calib, X, k):
    m1, m0 = calib.models[(k, 1)], calib.models[(k, 0)]
    if calib.method == SCR:
        return m1.predict(X) - m0.predict(X)
    return m1.predict(X, quantiles=0.5) - m0.predict(X, quantiles=0.5)


def _uncross(lo, hi):
    crossed = lo > hi
    if crossed.any():
        mid = 0.5 * (lo + hi)
        lo = np.where(crossed, mid, lo)
        hi = np.where(crossed, mid, hi)
    return lo, hi, int(crossed.sum())


def band_samples(calib: ConformalCalibration, X, offsets=None) -> IteBands:
    """ITE bands at covariates ``X`` using ``offsets`` (default: the global ones).

    Each arm's ``w`` interval is widened to contain its ``v`` interval when the
    SCQR offsets would otherwise invert them.
    """
    offsets = calib.offsets if offsets is None else offsets
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape[0], calib.d
    point = np.empty((n, d))
    out = {b: (np.empty((n, d)), np.empty((n, d))) for b in BANDS}
    crossings = 0
    for k in range(d):
        point[:, k] = _point(calib, X, k)
        arm = {}
        for b in ("v", "w"):
            for a in (0, 1):
                lo, hi, nx = _uncross(*_arm_intervals(calib, X, k, a, b, offsets))
                crossings += nx
                if b == "w":
                    # SCQR offsets at the two levels can shrink the wider band past the
                    # narrower one; the hull keeps w around v and only adds coverage
                    lo, hi = np.minimum(lo, arm["v", a][0]), np.maximum(hi, arm["v", a][1])
                arm[b, a] = lo, hi
            out[b][0][:, k] = arm[b, 1][0] - arm[b, 0][1]
            out[b][1][:, k] = arm[b, 1][1] - arm[b, 0][0]
    if crossings:
        log.info("%d SCQR arm intervals crossed after calibration and were collapsed", crossings)
    return IteBands(point, out["w"][0], out["w"][1], out["v"][0], out["v"][1], crossings)


def fit_and_band(ds: TrialDataset, cfg: ExperimentConfig, rng, forest_params: ForestHyperparams | None = None,
                 qrf_params: ForestHyperparams | None = None):
    """Fit arm regressors on a stratified half, calibrate on the other, band the validation half.

    Returns ``(calibration, bands over I_val, I_val row indices into ds)``.
    """
    validate_dataset(ds)
    stream = as_stream(rng)
    tr, val = split_indices(ds.treatment, stream.child(0))
    d = ds.d
    method = cfg.method
    levels = {"w": per_regressor_miscoverage(cfg.alpha, d), "v": per_regressor_miscoverage(cfg.alpha_v, d)}
    quantile_levels = {b: (a / 2.0, 1.0 - a / 2.0) for b, a in levels.items()}
    if method == SCR:
        hp, kind = forest_params or SYNTHETIC_RF, MEAN
    else:
        hp, kind = qrf_params or DEFAULT_QRF, QUANTILE

    X, Y, t = ds.covariates, ds.outcomes, ds.arm
    Xv, Yv, tv = X[val], Y[val], t[val]
    models, offsets = {}, {}
    val_scores = {b: np.full((val.size, d), np.nan) for b in BANDS}
    forest_stream = stream.child(1)
    for k in range(d):
        for arm in (0, 1):
            rows = tr[t[tr] == arm]
            model = fit_forest(X[rows], Y[rows, k], hp, kind, forest_stream.child(2 * k + arm))
            models[(k, arm)] = model
            mask = tv == arm
            for b in BANDS:
                if method == SCR:
                    scores = np.abs(Yv[mask, k] - model.predict(Xv[mask]))
                else:
                    q = model.predict(Xv[mask], quantiles=list(quantile_levels[b]))
                    scores = cqr_scores(q[:, 0], q[:, 1], Yv[mask, k])
                val_scores[b][mask, k] = scores
                offsets[(k, arm, b)] = conformal_offset(scores, levels[b])
    for s in val_scores.values():
        s.setflags(write=False)

    calib = ConformalCalibration(method, models, levels, offsets, val, tv, val_scores,
                                 quantile_levels if method == SCQR else {})
    return calib, band_samples(calib, Xv), val


def recalibrate_subgroup(calib: ConformalCalibration, members) -> dict:
    """Offsets recomputed from the validation scores of ``members`` only.

    ``members`` index the validation set (rows of ``calib.val_scores``).
    """
    if calib.method != SCR:
        raise ValueError("subgroup recalibration applies to SCR calibrations only")
    members = np.asarray(members)
    arms = calib.val_treatment[members]
    out = {}
    for arm in (0, 1):
        rows = members[arms == arm]
        if rows.size == 0:
            raise ValueError(f"subgroup has no validation samples in arm {arm}")
        for b in BANDS:
            scores = calib.val_scores[b][rows]
            for k in range(calib.d):
                out[(k, arm, b)] = conformal_offset(scores[:, k], calib.levels[b])
    return out
