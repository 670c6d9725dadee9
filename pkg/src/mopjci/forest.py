"""Random-forest mean and quantile regressors grown with plain CART.

Both estimators follow the scikit-learn estimator protocol.  The quantile
forest keeps every leaf's training targets and aggregates them across trees
Meinshausen-style; see :func:`mopjci._cart.weighted_quantiles` for the
quantile convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import _cart
from .core import RngStream, as_stream
from .validation import check_covariates, check_is_fitted, check_probability

MEAN = "mean"
QUANTILE = "quantile"


@dataclass(frozen=True)
class ForestHyperparams:
    n_estimators: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_features: float | str | int | None = 1.0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be positive")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be positive or None")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be at least 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be positive")

    def as_params(self) -> dict:
        return dict(self.__dict__)


# Tuned RF settings for the synthetic trials and the semi-synthetic covariate data.
SYNTHETIC_RF = ForestHyperparams(n_estimators=450, max_depth=38, min_samples_split=2,
                                 min_samples_leaf=1, max_features=1.0, bootstrap=True)
SEMI_SYNTHETIC_RF = ForestHyperparams(n_estimators=450, max_depth=50, min_samples_split=3,
                                      min_samples_leaf=1, max_features="sqrt", bootstrap=False)
DEFAULT_QRF = ForestHyperparams(n_estimators=100, max_depth=None, min_samples_split=2,
                                min_samples_leaf=1, max_features=1.0, bootstrap=True)


def _n_features_per_split(max_features, p):
    if max_features in (None, "all", "auto"):
        return p
    if max_features == "sqrt":
        return max(1, int(math.sqrt(p)))
    if isinstance(max_features, (int, np.integer)) and not isinstance(max_features, bool):
        if not 1 <= max_features <= p:
            raise ValueError(f"max_features={max_features} outside [1, {p}]")
        return int(max_features)
    f = float(max_features)
    if not 0.0 < f <= 1.0:
        raise ValueError(f"max_features fraction must lie in (0, 1], got {f}")
    return max(1, int(f * p))


class RandomForestRegressor(RegressorMixin, BaseEstimator):
    """Bagged CART regressor predicting the average of per-tree leaf means.

    ``random_state`` is an integer seed or an :class:`~mopjci.core.RngStream`;
    tree ``i`` draws its bootstrap sample and feature subsets from child
    stream ``i``, so fits are bit-reproducible.
    """

    _kind = MEAN

    def __init__(self, n_estimators=100, max_depth=None, min_samples_split=2,
                 min_samples_leaf=1, max_features=1.0, bootstrap=True, random_state=None):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.random_state = random_state

    @property
    def kind(self):
        return self._kind

    def fit(self, X, y):
        hp = ForestHyperparams(self.n_estimators, self.max_depth, self.min_samples_split,
                               self.min_samples_leaf, self.max_features, self.bootstrap)
        X = check_covariates(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        n, p = X.shape
        if n < hp.min_samples_split:
            raise ValueError(f"need at least min_samples_split={hp.min_samples_split} rows, got {n}")
        if not np.isfinite(y).all():
            raise ValueError("y contains non-finite values")
        k = _n_features_per_split(hp.max_features, p)
        max_depth = -1 if hp.max_depth is None else int(hp.max_depth)
        stream = as_stream(self.random_state)

        parts = {name: [] for name in ("feature", "threshold", "left", "right", "value",
                                       "leaf_start", "leaf_end", "targets")}
        roots = np.empty(hp.n_estimators, dtype=np.int64)
        node_offset = 0
        target_offset = 0
        for t in range(hp.n_estimators):
            gen = stream.child(t).generator()
            rows = gen.integers(0, n, size=n) if hp.bootstrap else np.arange(n, dtype=np.int64)
            seed = int(gen.integers(0, 2**31 - 1))
            f, thr, lft, rgt, val, ls, le, order = _cart.build_tree(
                X, y, rows.astype(np.int64), max_depth, hp.min_samples_split,
                hp.min_samples_leaf, k, seed)
            roots[t] = node_offset
            internal = f >= 0
            parts["feature"].append(f)
            parts["threshold"].append(thr)
            parts["left"].append(np.where(internal, lft + node_offset, -1))
            parts["right"].append(np.where(internal, rgt + node_offset, -1))
            parts["value"].append(val)
            parts["leaf_start"].append(ls + target_offset)
            parts["leaf_end"].append(le + target_offset)
            parts["targets"].append(y[order])
            node_offset += f.shape[0]
            target_offset += order.shape[0]

        self.roots_ = roots
        for name, chunks in parts.items():
            setattr(self, name + "_", np.concatenate(chunks))
        self.n_features_in_ = p
        self.y_range_ = (float(y.min()), float(y.max()))
        return self

    def apply(self, X):
        """Global leaf index reached in each tree, shape ``(n, n_estimators)``."""
        check_is_fitted(self, "roots_")
        X = check_covariates(X, self.n_features_in_)
        return _cart.apply_forest(X, self.roots_, self.feature_, self.threshold_, self.left_, self.right_)

    def predict(self, X):
        leaves = self.apply(X)
        return self.value_[leaves].mean(axis=1)

    @property
    def n_trees(self):
        return int(self.roots_.shape[0])

    def tree_depths(self):
        """Depth of every tree (root-only tree has depth 0)."""
        check_is_fitted(self, "roots_")
        depths = []
        bounds = list(self.roots_) + [self.feature_.shape[0]]
        for t in range(self.n_trees):
            lo, hi = bounds[t], bounds[t + 1]
            depth = {lo: 0}
            for node in range(lo, hi):
                if self.feature_[node] >= 0:
                    depth[self.left_[node]] = depth[node] + 1
                    depth[self.right_[node]] = depth[node] + 1
            depths.append(max(depth.values()))
        return depths

    def leaf_sizes(self):
        check_is_fitted(self, "roots_")
        leaf = self.feature_ < 0
        return (self.leaf_end_ - self.leaf_start_)[leaf]


class QuantileForestRegressor(RandomForestRegressor):
    """Quantile regression forest.

    ``predict(X)`` returns leaf-mean averages like the mean forest;
    ``predict(X, quantiles=q)`` returns conditional quantiles of the weighted
    empirical distribution of training targets.
    """

    _kind = QUANTILE

    def predict(self, X, quantiles=None):
        if quantiles is None:
            return super().predict(X)
        qs = np.atleast_1d(check_probability(quantiles, "quantiles")).astype(np.float64)
        leaves = self.apply(X)
        out = _cart.forest_quantiles(leaves, self.leaf_start_, self.leaf_end_, self.targets_, qs)
        return out[:, 0] if np.ndim(quantiles) == 0 else out


def fit_forest(X, y, hp: ForestHyperparams, kind: str = MEAN, rng: RngStream | int | None = None):
    """Fit a mean (``kind="mean"``) or quantile (``kind="quantile"``) forest."""
    cls = {MEAN: RandomForestRegressor, QUANTILE: QuantileForestRegressor}.get(kind)
    if cls is None:
        raise ValueError(f"kind must be 'mean' or 'quantile', got {kind!r}")
    return cls(**hp.as_params(), random_state=rng).fit(X, y)


def _as_rows(x, p):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != p:
            raise ValueError(f"feature vector has length {x.shape[0]}, model expects {p}")
        return x.reshape(1, -1), True
    return x, False


def predict_mean(model: RandomForestRegressor, x):
    """Forest mean at one feature vector (scalar) or at each row of a matrix."""
    check_is_fitted(model, "roots_")
    rows, single = _as_rows(x, model.n_features_in_)
    out = RandomForestRegressor.predict(model, rows)
    return float(out[0]) if single else out


def predict_quantile(model: QuantileForestRegressor, x, q):
    check_is_fitted(model, "roots_")
    if model.kind != QUANTILE:
        raise ValueError("predict_quantile needs a quantile forest")
    check_probability(q, "q")
    rows, single = _as_rows(x, model.n_features_in_)
    out = model.predict(rows, quantiles=q)
    return float(out[0]) if single and np.ndim(q) == 0 else (out[0] if single else out)
