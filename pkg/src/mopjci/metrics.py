"""Evaluation of a partition on held-out samples with known effects."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .conformal import IteBands
from .partition import PartitionTree, assign_groups


def _var(x):
    x = np.asarray(x, dtype=np.float64)
    return float(x.var(ddof=1)) if x.size > 1 else 0.0


def _nonempty(groups):
    return [np.asarray(g, dtype=np.float64) for g in groups if len(g) > 0]


def v_across(groups) -> float:
    """Unbiased variance of the group means (0 for a single group).

    ``groups`` is a sequence of 1-d arrays of true effects; empty groups are
    ignored.
    """
    means = [g.mean() for g in _nonempty(groups)]
    return _var(means)


def v_within(groups) -> float:
    """Mean of the unbiased within-group variances; singleton groups count as 0."""
    gs = _nonempty(groups)
    if not gs:
        raise ValueError("no non-empty groups")
    return float(np.mean([_var(g) for g in gs]))


def pehe(true_ite, est_ite) -> float:
    true_ite = np.asarray(true_ite, dtype=np.float64)
    est_ite = np.asarray(est_ite, dtype=np.float64)
    if true_ite.shape != est_ite.shape:
        raise ValueError(f"length mismatch: {true_ite.shape} vs {est_ite.shape}")
    return float(np.sqrt(np.mean((est_ite - true_ite) ** 2)))


def coverage_joint(true_ite, lo, hi) -> float:
    """Fraction of samples whose effects fall in their bands for every outcome at once."""
    true_ite = np.asarray(true_ite, dtype=np.float64)
    if true_ite.ndim == 1:
        true_ite = true_ite[:, None]
    lo = np.asarray(lo, dtype=np.float64).reshape(true_ite.shape[0], -1)
    hi = np.asarray(hi, dtype=np.float64).reshape(true_ite.shape[0], -1)
    if lo.shape != true_ite.shape or hi.shape != true_ite.shape:
        raise ValueError(f"shape mismatch: effects {true_ite.shape}, bands {lo.shape}/{hi.shape}")
    inside = (true_ite >= lo) & (true_ite <= hi)
    return float(inside.all(axis=1).mean())


def split_accuracy(tree: PartitionTree, expected, unexpected) -> tuple[int, int]:
    """``(acc, err)`` bits: all expected covariates used, any unexpected one used.

    Covariates are given as indices or, when the tree carries names, names.
    """
    expected, unexpected = set(expected), set(unexpected)
    if expected & unexpected:
        raise ValueError("expected and unexpected covariates overlap")
    used = tree.split_covariates()
    if tree.covariate_names:
        used = used | {tree.covariate_names[j] for j in used}
    return int(expected <= used), int(bool(unexpected & used))


@dataclass
class MetricsReport:
    num_groups: int
    v_across: list
    v_within: list
    pehe: list
    ci_width: list
    cov_joint: float
    split_acc: int
    split_err: int
    empty_groups: int = 0
    singleton_groups: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @property
    def d(self):
        return len(self.v_within)

    def row(self) -> dict:
        """Flat summary row: ``num_groups``, per-outcome columns, ``cov``."""
        out = {"num_groups": self.num_groups}
        for k in range(self.d):
            out[f"v_across_{k}"] = self.v_across[k]
            out[f"v_within_{k}"] = self.v_within[k]
            out[f"pehe_{k}"] = self.pehe[k]
            out[f"ci_width_{k}"] = self.ci_width[k]
        out["cov"] = self.cov_joint
        out["split_acc"] = self.split_acc
        out["split_err"] = self.split_err
        return out


def evaluate(tree: PartitionTree, X_test, true_ite, bands: IteBands, expected=(), unexpected=(),
             band_outcomes=None) -> MetricsReport:
    """All metrics for a tree on test samples.

    ``true_ite`` is ``(n, D)``.  ``bands`` are the test samples' bands (global
    offsets) for the outcomes listed in ``band_outcomes`` (default: all D).
    Group variances are reported for every outcome; PEHE and CI width are
    ``None`` for outcomes without bands, and coverage is joint over the
    banded ones.
    """
    true_ite = np.asarray(true_ite, dtype=np.float64)
    if true_ite.ndim == 1:
        true_ite = true_ite[:, None]
    D = true_ite.shape[1]
    band_outcomes = list(range(D)) if band_outcomes is None else list(band_outcomes)
    if bands.point.shape != (true_ite.shape[0], len(band_outcomes)):
        raise ValueError(f"bands shape {bands.point.shape} does not match {true_ite.shape[0]} samples "
                         f"x {len(band_outcomes)} outcomes")
    gid = assign_groups(tree, X_test)
    G = tree.num_groups
    members = [np.flatnonzero(gid == g) for g in range(G)]
    sizes = [m.size for m in members]
    va, vw = [], []
    pe, cw = [None] * D, [None] * D
    for k in range(D):
        groups = [true_ite[m, k] for m in members]
        va.append(v_across(groups))
        vw.append(v_within(groups))
    for j, k in enumerate(band_outcomes):
        pe[k] = pehe(true_ite[:, k], bands.point[:, j])
        cw[k] = float(np.mean(bands.w_width[:, j]))
    acc, err = split_accuracy(tree, expected, unexpected)
    return MetricsReport(
        num_groups=G, v_across=va, v_within=vw, pehe=pe, ci_width=cw,
        cov_joint=coverage_joint(true_ite[:, band_outcomes], bands.w_lo, bands.w_hi),
        split_acc=acc, split_err=err,
        empty_groups=sum(s == 0 for s in sizes), singleton_groups=sum(s == 1 for s in sizes))


@dataclass
class Aggregate:
    """Mean and unbiased sd of each metric over runs; split bits become percentages."""

    n_runs: int
    mean: dict = field(default_factory=dict)
    sd: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"n_runs": self.n_runs, "mean": self.mean, "sd": self.sd}


def aggregate(reports) -> Aggregate:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    rows = [r.row() for r in reports]
    agg = Aggregate(len(rows))
    for key in rows[0]:
        vals = [row[key] for row in rows if row[key] is not None]
        if not vals:
            continue
        mean = math.fsum(vals) / len(vals)
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        if key in ("split_acc", "split_err"):
            mean, sd = 100.0 * mean, 100.0 * sd
        agg.mean[key] = mean
        agg.sd[key] = sd
    return agg


def table_columns(d: int) -> list:
    cols = ["num_groups"]
    for metric in ("v_across", "v_within", "pehe", "ci_width"):
        cols += [f"{metric}_{k}" for k in range(d)]
    return cols + ["cov", "split_acc", "split_err"]


def summary_csv(aggregates: dict, d: int) -> str:
    """CSV with one row per method: ``method`` then ``<col>_mean``/``<col>_sd`` pairs.

    Methods restricted to fewer outcomes leave the missing columns blank.
    """
    cols = table_columns(d)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [f"{c}_{s}" for c in cols for s in ("mean", "sd")])
    for method, agg in aggregates.items():
        row = [method]
        for c in cols:
            row += [repr(agg.mean[c]) if c in agg.mean else "", repr(agg.sd[c]) if c in agg.sd else ""]
        w.writerow(row)
    return buf.getvalue()
