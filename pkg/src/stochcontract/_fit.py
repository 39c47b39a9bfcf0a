"""Small least-squares helpers shared by the estimators."""

import numpy as np


def intercept_weights(h, weights=None):
    """Coefficients ``c`` such that ``c @ y`` is the intercept of the
    (weighted) least-squares line through the points ``(h_r, y_r)``.

    Returning the linear functional instead of the fitted value lets callers
    push per-sample data through the same extrapolation and get exact
    standard errors for the intercept.
    """
    h = np.asarray(h, dtype=float)
    if weights is None:
        weights = np.ones_like(h)
    weights = np.asarray(weights, dtype=float)
    X = np.column_stack([np.ones_like(h), h])
    XtW = X.T * weights
    return np.linalg.solve(XtW @ X, XtW)[0]


def smallest_rungs(h_ladder, count=3):
    """Indices of the ``count`` smallest step sizes of a ladder."""
    h_ladder = np.asarray(h_ladder, dtype=float)
    return np.argsort(h_ladder)[:count]


def check_ladder(h_ladder, min_rungs=3, max_ratio=None):
    h = np.asarray(h_ladder, dtype=float)
    if h.ndim != 1 or h.size < min_rungs:
        raise ValueError(f"h ladder needs at least {min_rungs} rungs, got {h.size}")
    if not np.all(np.isfinite(h)) or np.any(h <= 0):
        raise ValueError("h ladder entries must be positive and finite")
    if np.any(np.diff(h) >= 0):
        raise ValueError("h ladder must be strictly decreasing")
    if max_ratio is not None and np.any(h[1:] / h[:-1] > max_ratio + 1e-12):
        raise ValueError(f"consecutive h ladder ratios must be <= {max_ratio}")
    return h


def log_slope(t, values):
    """Least-squares slope of ``log(values)`` against ``t``."""
    t = np.asarray(t, dtype=float)
    y = np.log(np.asarray(values, dtype=float))
    tc = t - t.mean()
    return float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))
