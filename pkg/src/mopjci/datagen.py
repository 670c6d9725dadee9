"""Simulated two-outcome RCTs with known treatment effects.

The synthetic trial mimics a COVID-19 antiviral study: outcome A (days to
improvement) is driven by ``time`` from symptom onset, outcome B (end-point
ALT) by baseline ``ALT``.  The prognostic term ``X0 @ beta`` uses covariates
standardized by their nominal distribution so that it stays on the same
scale as the effects.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DatasetError, TrialDataset, as_stream

# name -> (distribution, loc, scale); "uniform" uses (low, high)
COVARIATES = {
    "age": ("normal", 66.0, 4.1),
    "WBC": ("normal", 6.2, 1.0),
    "lymphocyte": ("normal", 0.8, 0.1),
    "platelet": ("normal", 183.0, 20.4),
    "creatinine": ("normal", 68.0, 6.6),
    "AST": ("normal", 31.0, 5.1),
    "ALT": ("normal", 16.0, 5.1),
    "LDH": ("normal", 339.0, 51.0),
    "CK": ("normal", 76.0, 21.0),
    "time": ("uniform", 9.0, 14.0),
}
COVARIATE_NAMES = tuple(COVARIATES)
DRIVERS = ("time", "ALT")
OUTCOME_NAMES = ("y0", "y1")

COEF_VALUES = (0.0, 0.1, 0.2, 0.3, 0.4)
COEF_PROBS = (0.6, 0.1, 0.1, 0.1, 0.1)

VARIANTS = ("uncorrelated", "correlated_covariates", "heteroscedastic")


def nominal_moments(name):
    dist, a, b = COVARIATES[name]
    if dist == "normal":
        return a, b
    return 0.5 * (a + b), (b - a) / np.sqrt(12.0)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 300
    n_test: int = 200
    variant: str = "uncorrelated"
    noise_sd: float = 0.1
    seed: int = 0
    rho: float = 0.8
    hetero_scale: float = 10.0

    def __post_init__(self):
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError("n_train and n_test must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")


def draw_coefficients(size, gen, values=COEF_VALUES, probs=COEF_PROBS):
    return gen.choice(np.asarray(values, dtype=np.float64), size=size, p=np.asarray(probs, dtype=np.float64))


def draw_covariates(n, gen, rho=None):
    """Covariate matrix with the nominal marginals.

    With ``rho`` set, ALT is a linear blend of standardized time and fresh
    noise so that ``corr(time, ALT) ~= rho`` while its N(16, 5.1) marginal
    mean and sd are kept.
    """
    cols = []
    for name in COVARIATE_NAMES:
        dist, a, b = COVARIATES[name]
        cols.append(gen.normal(a, b, n) if dist == "normal" else gen.uniform(a, b, n))
    X = np.column_stack(cols)
    if rho is not None:
        t_mean, t_sd = nominal_moments("time")
        j = COVARIATE_NAMES.index("ALT")
        z = (X[:, j] - 16.0) / 5.1
        X[:, j] = 16.0 + 5.1 * rho * (X[:, COVARIATE_NAMES.index("time")] - t_mean) / t_sd \
            + 5.1 * np.sqrt(1.0 - rho * rho) * z
    return X


def standardized(X):
    mu = np.array([nominal_moments(c)[0] for c in COVARIATE_NAMES])
    sd = np.array([nominal_moments(c)[1] for c in COVARIATE_NAMES])
    return (X - mu) / sd


def synthetic_potentials(X, betas):
    """Noiseless potential means ``(mu0, mu1)``, each ``(n, 2)``.

    ``betas[k]`` holds the prognostic coefficients of outcome ``k`` over all
    covariates except its driver.
    """
    Z = standardized(X)
    mu0 = np.empty((X.shape[0], 2))
    mu1 = np.empty_like(mu0)
    for k, driver in enumerate(DRIVERS):
        j = COVARIATE_NAMES.index(driver)
        others = [i for i in range(len(COVARIATE_NAMES)) if i != j]
        base = Z[:, others] @ betas[k]
        x = X[:, j]
        s = sigmoid(x - nominal_moments(driver)[0])
        if k == 0:
            mu0[:, k] = base + s + 20.0
            mu1[:, k] = base + 20.0 * s
        else:
            mu0[:, k] = base + s + x
            mu1[:, k] = base + x * s + x
    return mu0, mu1


def true_ite_synthetic(X):
    """Closed-form effects ``(19 s(time - 11.5) - 20, (ALT - 1) s(ALT - 16))``."""
    t = X[:, COVARIATE_NAMES.index("time")]
    alt = X[:, COVARIATE_NAMES.index("ALT")]
    return np.column_stack([19.0 * sigmoid(t - 11.5) - 20.0, (alt - 1.0) * sigmoid(alt - 16.0)])


def noise_scale(X, spec: SyntheticSpec):
    n = X.shape[0]
    sd = np.full((n, 2), spec.noise_sd)
    if spec.variant == "heteroscedastic":
        t = X[:, COVARIATE_NAMES.index("time")]
        alt = X[:, COVARIATE_NAMES.index("ALT")]
        sd[:, 0] = spec.noise_sd * (1.0 + spec.hetero_scale * (t - 9.0))
        sd[:, 1] = spec.noise_sd * (1.0 + spec.hetero_scale * np.abs(alt - 16.0))
    return sd


def _synthetic(spec: SyntheticSpec, rng):
    gen = as_stream(rng).generator()
    n = spec.n_train + spec.n_test
    betas = [draw_coefficients(len(COVARIATE_NAMES) - 1, gen) for _ in DRIVERS]
    X = draw_covariates(n, gen, rho=spec.rho if spec.variant == "correlated_covariates" else None)
    t = (gen.random(n) < 0.5).astype(np.float64)
    mu0, mu1 = synthetic_potentials(X, betas)
    sd = noise_scale(X, spec)
    noise = gen.standard_normal((n, 2)) * sd
    y = np.where(t[:, None] == 1.0, mu1, mu0) + noise
    ds = TrialDataset(X, COVARIATE_NAMES, t, y, OUTCOME_NAMES, mu1 - mu0)
    return ds.subset(np.arange(spec.n_train)), ds.subset(np.arange(spec.n_train, n))


def gen_synthetic(spec: SyntheticSpec, rng=None):
    """Train and test sets drawn from one data-generating process (one ``beta`` draw)."""
    return _synthetic(spec, spec.seed if rng is None else rng)


def gen_synthetic_correlated(spec: SyntheticSpec, rng=None):
    if spec.variant != "correlated_covariates":
        raise ValueError("spec.variant must be 'correlated_covariates'")
    return gen_synthetic(spec, rng)


def gen_synthetic_heteroscedastic(spec: SyntheticSpec, rng=None):
    if spec.variant != "heteroscedastic":
        raise ValueError("spec.variant must be 'heteroscedastic'")
    return gen_synthetic(spec, rng)


# -- covariate files and response surfaces -----------------------------------------------

def load_covariates(path):
    """Read a numeric CSV with a header row; returns ``(matrix, names)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: no rows")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    if not body:
        raise DatasetError(f"{path}: no rows")
    X = np.empty((len(body), len(header)))
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DatasetError(f"{path}: row {i + 1} has {len(r)} fields, expected {len(header)}")
        for j, cell in enumerate(r):
            try:
                X[i, j] = float(cell)
            except ValueError:
                raise DatasetError(f"{path}: cannot parse {cell!r} at row {i + 1}, column {j + 1} ({header[j]})") from None
    return X, tuple(header)


EFFECT_FORMS = ("logistic_scaled", "linear_in_driver")


@dataclass(frozen=True)
class OutcomeSurface:
    """Treatment effect of one outcome as a function of its driver covariate.

    ``logistic_scaled``: effect ``(slope * x - 1) * s(x - m)``.
    ``linear_in_driver``: effect ``slope * x``.
    ``m`` is the driver's mean over the loaded cohort.
    """

    driver: str
    form: str = "logistic_scaled"
    slope: float = 1.0

    def __post_init__(self):
        if self.form not in EFFECT_FORMS:
            raise ValueError(f"form must be one of {EFFECT_FORMS}, got {self.form!r}")


@dataclass(frozen=True)
class ResponseSurfaceSpec:
    outcomes: tuple
    coef_values: tuple = COEF_VALUES
    coef_probs: tuple = COEF_PROBS
    noise_sd: float = 0.1
    treatment_column: str | None = None
    n_test_fraction: float = 0.2
    expected: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(
            o if isinstance(o, OutcomeSurface) else OutcomeSurface(**o) for o in self.outcomes))
        if not self.outcomes:
            raise ValueError("at least one outcome surface is required")
        if len(self.coef_values) != len(self.coef_probs):
            raise ValueError("coef_values and coef_probs differ in length")
        if any(p < 0 for p in self.coef_probs) or abs(sum(self.coef_probs) - 1.0) > 1e-9:
            raise ValueError("coef_probs must be nonnegative and sum to 1")
        if not 0.0 < self.n_test_fraction < 1.0:
            raise ValueError("n_test_fraction must lie in (0, 1)")

    @property
    def drivers(self):
        return tuple(o.driver for o in self.outcomes)

    @classmethod
    def from_dict(cls, data: dict) -> "ResponseSurfaceSpec":
        data = dict(data)
        for key in ("coef_values", "coef_probs", "expected"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ResponseSurfaceSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def gen_response_surface(covariates, spec: ResponseSurfaceSpec, rng=None, names=None) -> TrialDataset:
    """Semi-synthetic trial over real covariates.

    ``covariates`` is ``(matrix, names)`` as returned by
    :func:`load_covariates`, or a matrix with ``names`` given separately.
    Per outcome, both potentials share ``Z0 @ beta + x`` where ``Z0`` are the
    other covariates standardized over the cohort and ``x`` the driver; the
    treated potential adds the outcome's effect.
    """
    if names is None:
        X, names = covariates
    else:
        X = covariates
    X = np.asarray(X, dtype=np.float64)
    names = list(names)
    for drv in spec.drivers:
        if drv not in names:
            raise DatasetError(f"driver covariate {drv!r} not in covariate columns")
    gen = as_stream(rng).generator()
    n = X.shape[0]
    if spec.treatment_column is not None:
        if spec.treatment_column not in names:
            raise DatasetError(f"treatment column {spec.treatment_column!r} not found")
        j = names.index(spec.treatment_column)
        t = X[:, j].copy()
        X = np.delete(X, j, axis=1)
        names.pop(j)
    else:
        t = (gen.random(n) < 0.5).astype(np.float64)

    sd = X.std(axis=0)
    Z = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    d = len(spec.outcomes)
    mu0 = np.empty((n, d))
    mu1 = np.empty((n, d))
    for k, surf in enumerate(spec.outcomes):
        j = names.index(surf.driver)
        others = [i for i in range(len(names)) if i != j]
        beta = draw_coefficients(len(others), gen, spec.coef_values, spec.coef_probs)
        x = X[:, j]
        base = Z[:, others] @ beta + x
        if surf.form == "logistic_scaled":
            effect = (surf.slope * x - 1.0) * sigmoid(x - x.mean())
        else:
            effect = surf.slope * x
        mu0[:, k] = base
        mu1[:, k] = base + effect
    noise = gen.standard_normal((n, d)) * spec.noise_sd
    y = np.where(t[:, None] == 1.0, mu1, mu0) + noise
    return TrialDataset(X, tuple(names), t, y, tuple(f"y{k}" for k in range(d)), mu1 - mu0)
