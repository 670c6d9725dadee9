"""Shared domain types: trial datasets, experiment configuration and RNG streams."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ESTIMATORS = ("rf_scr", "qrf_scqr")


class DatasetError(ValueError):
    """Raised when a dataset violates one of the trial invariants."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Covariates, binary treatment and ``d`` outcome columns of a randomized trial.

    ``true_ite`` holds the oracle treatment effects when the data were
    simulated; it is ``None`` for observed data.
    """

    covariates: np.ndarray
    covariate_names: tuple
    treatment: np.ndarray
    outcomes: np.ndarray
    outcome_names: tuple
    true_ite: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        Y = np.asarray(self.outcomes, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        object.__setattr__(self, "covariates", _frozen(X))
        object.__setattr__(self, "outcomes", _frozen(Y))
        object.__setattr__(self, "treatment", _frozen(np.asarray(self.treatment).ravel()))
        object.__setattr__(self, "covariate_names", tuple(str(c) for c in self.covariate_names))
        object.__setattr__(self, "outcome_names", tuple(str(c) for c in self.outcome_names))
        if self.true_ite is not None:
            tau = np.asarray(self.true_ite, dtype=np.float64)
            if tau.ndim == 1:
                tau = tau.reshape(-1, 1)
            object.__setattr__(self, "true_ite", _frozen(tau))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def d(self) -> int:
        return self.outcomes.shape[1]

    @property
    def arm(self) -> np.ndarray:
        """Treatment as an int array (only meaningful after validation)."""
        return self.treatment.astype(np.int64)

    def subset(self, idx) -> "TrialDataset":
        idx = np.asarray(idx)
        return TrialDataset(
            self.covariates[idx],
            self.covariate_names,
            self.treatment[idx],
            self.outcomes[idx],
            self.outcome_names,
            None if self.true_ite is None else self.true_ite[idx],
        )

    def select_outcomes(self, ks: Sequence[int]) -> "TrialDataset":
        ks = list(ks)
        return TrialDataset(
            self.covariates,
            self.covariate_names,
            self.treatment,
            self.outcomes[:, ks],
            tuple(self.outcome_names[k] for k in ks),
            None if self.true_ite is None else self.true_ite[:, ks],
        )


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"interval lower bound {self.lo} exceeds upper bound {self.hi}")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def __contains__(self, value) -> bool:
        return self.lo <= value <= self.hi


@dataclass(frozen=True)
class ExperimentConfig:
    """Hyperparameters of one experiment.

    ``outcome_weights`` is the per-outcome weight vector; with two outcomes it
    is ``(beta, 1 - beta)``.  ``lambda_`` is serialized as ``"lambda"``.
    ``min_leaf`` bounds a partition group's validation size and ``min_arm``
    the number of validation samples of each treatment arm in it.
    """

    alpha: float = 0.1
    alpha_v: float = 0.8
    lambda_: float = 0.25
    gamma: float = 0.05
    outcome_weights: tuple = (0.5, 0.5)
    estimator: str = "rf_scr"
    min_leaf: int = 10
    min_arm: int = 10
    n_runs: int = 30
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "outcome_weights", tuple(float(w) for w in self.outcome_weights))
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.alpha_v < 1.0:
            raise ValueError(f"alpha_v must lie in (0, 1), got {self.alpha_v}")
        if not self.alpha < self.alpha_v:
            raise ValueError("alpha must be smaller than alpha_v (the W band is the wider one)")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lambda_}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        w = self.outcome_weights
        if len(w) == 0 or any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError(f"outcome_weights must be nonnegative and sum to 1, got {w}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if int(self.min_leaf) < 1:
            raise ValueError("min_leaf must be a positive integer")
        if int(self.min_arm) < 0:
            raise ValueError("min_arm must be a nonnegative integer")
        if int(self.n_runs) < 1:
            raise ValueError("n_runs must be a positive integer")

    @property
    def method(self) -> str:
        return "scr" if self.estimator == "rf_scr" else "scqr"

    def replace(self, **changes) -> "ExperimentConfig":
        if "beta" in changes:
            b = changes.pop("beta")
            changes["outcome_weights"] = (b, 1.0 - b)
        if "lambda" in changes:
            changes["lambda_"] = changes.pop("lambda")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            key = "lambda" if f.name == "lambda_" else f.name
            value = getattr(self, f.name)
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {"lambda" if f.name == "lambda_" else f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {("lambda_" if k == "lambda" else k): v for k, v in data.items()}
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Streams are Philox generators keyed by a ``SeedSequence`` spawn key, so
    children derived with :meth:`child` are independent of each other and of
    the order in which they are created.
    """

    seed: int
    stream_id: int = 0
    parent: tuple = field(default=(), repr=False)

    @property
    def key(self) -> tuple:
        return self.parent + (int(self.stream_id),)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, int(stream_id), self.key)


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError(f"expected an RngStream or integer seed, got {type(rng).__name__}")


def validate_dataset(ds: TrialDataset) -> TrialDataset:
    """Check every :class:`TrialDataset` invariant; return ``ds`` unchanged."""
    X, Y, t = ds.covariates, ds.outcomes, ds.treatment
    if X.ndim != 2 or Y.ndim != 2:
        raise DatasetError("covariates and outcomes must be 2-d")
    n = X.shape[0]
    if n < 4:
        raise DatasetError(f"too few samples: N={n} < 4")
    if X.shape[1] < 1:
        raise DatasetError("no covariates")
    if Y.shape[1] < 1:
        raise DatasetError("no outcomes")
    if Y.shape[0] != n or t.shape[0] != n:
        raise DatasetError(f"row count mismatch: covariates {n}, treatment {t.shape[0]}, outcomes {Y.shape[0]}")
    if len(ds.covariate_names) != X.shape[1]:
        raise DatasetError("covariate_names length does not match covariate columns")
    if len(ds.outcome_names) != Y.shape[1]:
        raise DatasetError("outcome_names length does not match outcome columns")
    bad = ~((t == 0) | (t == 1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DatasetError(f"treatment value at row {i} is {t[i]!r}, not 0 or 1")
    if not (t == 1).any() or not (t == 0).any():
        raise DatasetError("treatment arm empty")
    for name, M in (("covariate", X), ("outcome", Y)):
        nonfinite = ~np.isfinite(M)
        if nonfinite.any():
            i, j = np.argwhere(nonfinite)[0]
            raise DatasetError(f"non-finite {name} at row {i}, col {j}")
    if ds.true_ite is not None:
        if ds.true_ite.shape != Y.shape:
            raise DatasetError(f"true_ite shape {ds.true_ite.shape} differs from outcomes shape {Y.shape}")
        if not np.isfinite(ds.true_ite).all():
            i, j = np.argwhere(~np.isfinite(ds.true_ite))[0]
            raise DatasetError(f"non-finite true_ite at row {i}, col {j}")
    return ds


def split_indices(treatment, rng) -> tuple[np.ndarray, np.ndarray]:
    """Stratified 50/50 split of row indices by treatment arm.

    When an arm has odd size its extra row alternates between the two parts,
    so the parts differ in size by at most one overall.
    """
    t = np.asarray(treatment)
    gen = as_stream(rng).generator()
    first, second = [], []
    extra_to_first = True
    for a in (0, 1):
        rows = np.flatnonzero(t == a)
        if rows.size < 2:
            raise DatasetError(f"arm {a} has {rows.size} samples; at least 2 are needed to split")
        rows = gen.permutation(rows)
        half = rows.size // 2
        if rows.size % 2:
            cut = half + 1 if extra_to_first else half
            extra_to_first = not extra_to_first
        else:
            cut = half
        first.append(rows[:cut])
        second.append(rows[cut:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def split_train_validate(ds: TrialDataset, rng) -> tuple[TrialDataset, TrialDataset]:
    tr, val = split_indices(ds.treatment, rng)
    return ds.subset(tr), ds.subset(val)


# -- dataset CSV -----------------------------------------------------------------

def write_dataset_csv(ds: TrialDataset, path) -> None:
    d = ds.d
    header = ["t"] + [f"y{k}" for k in range(d)]
    if ds.true_ite is not None:
        header += [f"tau{k}" for k in range(d)]
    header += list(ds.covariate_names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [str(int(ds.treatment[i]))]
            row += [repr(float(v)) for v in ds.outcomes[i]]
            if ds.true_ite is not None:
                row += [repr(float(v)) for v in ds.true_ite[i]]
            row += [repr(float(v)) for v in ds.covariates[i]]
            w.writerow(row)


def read_dataset_csv(path) -> TrialDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if "t" not in header:
        raise DatasetError(f"{path}: missing treatment column 't'")
    y_cols = sorted((h for h in header if h.startswith("y") and h[1:].isdigit()), key=lambda h: int(h[1:]))
    tau_cols = sorted((h for h in header if h.startswith("tau") and h[3:].isdigit()), key=lambda h: int(h[3:]))
    if not y_cols:
        raise DatasetError(f"{path}: no outcome columns y0..y{{d-1}}")
    if [int(h[1:]) for h in y_cols] != list(range(len(y_cols))):
        raise DatasetError(f"{path}: outcome columns must be y0..y{len(y_cols) - 1}")
    if tau_cols and len(tau_cols) != len(y_cols):
        raise DatasetError(f"{path}: {len(tau_cols)} tau columns for {len(y_cols)} outcomes")
    special = {"t", *y_cols, *tau_cols}
    cov_cols = [h for h in header if h not in special]
    col = {h: j for j, h in enumerate(header)}
    values = np.empty((len(body), len(header)))
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DatasetError(f"{path}: row {i + 1} has {len(r)} fields, expected {len(header)}")
        for j, cell in enumerate(r):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise DatasetError(f"{path}: non-numeric value {cell!r} at row {i + 1}, column {header[j]!r}") from None
    pick = lambda names: values[:, [col[h] for h in names]]  # noqa: E731
    return TrialDataset(
        covariates=pick(cov_cols),
        covariate_names=tuple(cov_cols),
        treatment=values[:, col["t"]],
        outcomes=pick(y_cols),
        outcome_names=tuple(y_cols),
        true_ite=pick(tau_cols) if tau_cols else None,
    )
