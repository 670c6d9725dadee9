"""scikit-learn style estimator around the conformal banding and joint partitioning."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .conformal import band_samples, fit_and_band
from .core import ExperimentConfig, TrialDataset
from .forest import ForestHyperparams
from .partition import assign_groups, partition
from .validation import check_covariates, check_is_fitted, check_outcomes, check_treatment


class MOPJCI(BaseEstimator):
    """Subgroups with homogeneous, tightly bounded effects on several outcomes.

    ``fit(X, Y, treatment)`` splits the trial in halves, fits one forest per
    (outcome, arm) on the first, calibrates joint ITE bands on the second and
    partitions that half.  ``predict`` returns group ids.

    Parameters mirror :class:`~mopjci.core.ExperimentConfig`;
    ``outcome_weights=None`` weights all outcomes equally.
    """

    def __init__(self, alpha=0.1, alpha_v=0.8, lambda_=0.25, gamma=0.05, outcome_weights=None,
                 estimator="rf_scr", min_leaf=10, min_arm=10, forest_params=None, qrf_params=None,
                 random_state=0):
        self.alpha = alpha
        self.alpha_v = alpha_v
        self.lambda_ = lambda_
        self.gamma = gamma
        self.outcome_weights = outcome_weights
        self.estimator = estimator
        self.min_leaf = min_leaf
        self.min_arm = min_arm
        self.forest_params = forest_params
        self.qrf_params = qrf_params
        self.random_state = random_state

    def _config(self, d):
        w = self.outcome_weights if self.outcome_weights is not None else (1.0 / d,) * d
        return ExperimentConfig(alpha=self.alpha, alpha_v=self.alpha_v, lambda_=self.lambda_, gamma=self.gamma,
                                outcome_weights=tuple(w), estimator=self.estimator, min_leaf=self.min_leaf,
                                min_arm=self.min_arm)

    def fit(self, X, Y, treatment, covariate_names=None):
        X = check_covariates(X)
        n = X.shape[0]
        Y = check_outcomes(Y, n)
        t = check_treatment(treatment, n)
        names = tuple(covariate_names) if covariate_names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
        ds = TrialDataset(X, names, t.astype(np.float64), Y, tuple(f"y{k}" for k in range(Y.shape[1])), None)
        cfg = self._config(Y.shape[1])
        fp = ForestHyperparams(**self.forest_params) if isinstance(self.forest_params, dict) else self.forest_params
        qp = ForestHyperparams(**self.qrf_params) if isinstance(self.qrf_params, dict) else self.qrf_params
        calib, bands, val = fit_and_band(ds, cfg, self.random_state, fp, qp)
        self.config_ = cfg
        self.calibration_ = calib
        self.validation_index_ = val
        self.validation_bands_ = bands
        self.tree_ = partition(X[val], bands, cfg, calib, names)
        self.n_features_in_ = X.shape[1]
        self.n_outcomes_ = Y.shape[1]
        self.n_groups_ = self.tree_.num_groups
        return self

    def predict(self, X):
        """Group id of each row."""
        check_is_fitted(self, "tree_")
        return assign_groups(self.tree_, check_covariates(X, self.n_features_in_))

    def bands(self, X):
        check_is_fitted(self, "tree_")
        return band_samples(self.calibration_, check_covariates(X, self.n_features_in_))

    def predict_ite(self, X):
        """Point effect estimates, shape ``(n, d)``."""
        return self.bands(X).point

    def predict_interval(self, X, band="w"):
        """``(lo, hi)`` arrays of shape ``(n, d)``; ``band="w"`` is the ``1 - alpha`` joint band."""
        b = self.bands(X)
        if band == "w":
            return b.w_lo, b.w_hi
        if band == "v":
            return b.v_lo, b.v_hi
        raise ValueError("band must be 'w' or 'v'")

    def group_effects(self):
        """Mean point effect per group and outcome, shape ``(n_groups, d)``."""
        check_is_fitted(self, "tree_")
        return np.array([leaf.means for leaf in self.tree_.leaves])
