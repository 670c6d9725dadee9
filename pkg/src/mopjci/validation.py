"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array, check_is_fitted  # noqa: F401  (re-exported)


def check_covariates(X, n_features=None):
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, but the model was fitted with {n_features}")
    return X


def check_treatment(t, n):
    t = np.asarray(t).ravel()
    if t.shape[0] != n:
        raise ValueError(f"treatment has {t.shape[0]} entries for {n} samples")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("treatment must contain only 0 and 1")
    t = t.astype(np.int64)
    if t.min() == t.max():
        raise ValueError("treatment arm empty")
    return t


def check_outcomes(Y, n):
    Y = check_array(Y, dtype=np.float64, ensure_2d=False)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    if Y.shape[0] != n:
        raise ValueError(f"outcomes have {Y.shape[0]} rows for {n} samples")
    return Y


def check_probability(q, name="q", closed=False):
    q = np.asarray(q, dtype=np.float64)
    ok = (q >= 0) & (q <= 1) if closed else (q > 0) & (q < 1)
    if not np.all(ok):
        bounds = "[0, 1]" if closed else "(0, 1)"
        raise ValueError(f"{name} must lie in {bounds}, got {q}")
    return q
