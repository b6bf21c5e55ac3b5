"""Small statistical helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
from scipy import stats as sps
from statsmodels.stats.proportion import proportion_confint

Z95 = float(sps.norm.ppf(0.975))


def wilson_interval(successes, trials, level: float = 0.95):
    lo, hi = proportion_confint(np.asarray(successes), trials, alpha=1.0 - level, method="wilson")
    return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)


def mean_se(values):
    """Sample mean and its standard error."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        return float(values.mean()) if n else float("nan"), float("inf")
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n))


def ratio_influence(a, b):
    """Influence values of mean(a)/mean(b); their mean-SE is the delta-method SE."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ma, mb = a.mean(), b.mean()
    return ma / mb, a / mb - ma * b / mb**2


def log_survival_cov(p, reps):
    """Covariance of log p_hat across horizons when one set of paths serves all.

    For n_i <= n_j, Cov(p_i_hat, p_j_hat) = p_j (1 - p_i) / N, so
    Cov(log p_i_hat, log p_j_hat) = (1/p_i - 1) / N with p_i the larger one.
    """
    p = np.asarray(p, dtype=float)
    big = np.maximum.outer(p, p)
    return (1.0 / big - 1.0) / reps


def weighted_slope(x, y, cov, weights=None):
    """Weighted least-squares line with a sandwich variance under ``cov``.

    Returns (slope, intercept, slope_se).  Default weights are the inverse
    diagonal of ``cov``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    cov = np.asarray(cov, dtype=float)
    w = 1.0 / np.diag(cov) if weights is None else np.asarray(weights, dtype=float)
    X = np.column_stack([np.ones_like(x), x])
    bread = np.linalg.inv(X.T @ (w[:, None] * X))
    H = bread @ (X.T * w)
    coef = H @ y
    var = H @ cov @ H.T
    return float(coef[1]), float(coef[0]), float(np.sqrt(var[1, 1]))


def curvature_pvalue(x, y, cov):
    """Wald test of a quadratic term in a GLS fit of y on x under ``cov``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    X = np.column_stack([np.ones_like(xc), xc, xc**2])
    if X.shape[0] <= 3:
        return float("nan")
    cinv = np.linalg.inv(cov)
    var = np.linalg.inv(X.T @ cinv @ X)
    coef = var @ X.T @ cinv @ y
    z = coef[2] / np.sqrt(var[2, 2])
    return float(2.0 * sps.norm.sf(abs(z)))


def bootstrap(stat, arrays, n_boot: int, gen: np.random.Generator):
    """Path-level bootstrap replicates of ``stat(*resampled arrays)``."""
    n = len(arrays[0])
    out = []
    for _ in range(n_boot):
        idx = gen.integers(0, n, size=n)
        out.append(stat(*[a[idx] for a in arrays]))
    return np.asarray(out)
