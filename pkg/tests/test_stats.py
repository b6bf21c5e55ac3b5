import math

import numpy as np
import pytest
import statsmodels.api as sm

from stablecone.stats import (bootstrap, curvature_pvalue, log_survival_cov, mean_se,
                              ratio_influence, weighted_slope, wilson_interval)


def test_wilson_textbook_formula():
    k, n, z = 37, 200, 1.959963984540054
    p = k / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
    lo, hi = wilson_interval(k, n)
    assert float(lo) == pytest.approx(centre - half, rel=1e-9)
    assert float(hi) == pytest.approx(centre + half, rel=1e-9)


def test_mean_se():
    m, se = mean_se([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert mean_se([1.0])[1] == math.inf


def test_ratio_influence_matches_replicate_spread():
    rng = np.random.default_rng(0)

    def draw():
        a = rng.normal(3, 1, 2000)
        return a, rng.normal(2, 1, 2000) + 0.5 * a

    a, b = draw()
    r, infl = ratio_influence(a, b)
    assert r == pytest.approx(a.mean() / b.mean())
    assert abs(infl.mean()) < 1e-12
    reps = []
    for _ in range(400):
        x, y = draw()
        reps.append(x.mean() / y.mean())
    assert infl.std(ddof=1) / math.sqrt(infl.size) == pytest.approx(np.std(reps), rel=0.15)


def test_log_survival_cov_against_simulation():
    rng = np.random.default_rng(1)
    reps, trials = 400, 3000
    tau = rng.geometric(0.02, size=(trials, reps))
    hz = np.array([10, 30, 60])
    p = np.array([(tau > n).mean() for n in hz])
    logp = np.log(np.stack([(tau > n).mean(axis=1) for n in hz], axis=1))
    emp = np.cov(logp.T)
    model = log_survival_cov(p, reps)
    assert np.allclose(emp, model, rtol=0.15, atol=1e-5)


def test_weighted_slope_matches_statsmodels_wls():
    rng = np.random.default_rng(2)
    x = np.linspace(0, 5, 12)
    var = 0.01 * (1 + x)
    y = 1.5 - 0.7 * x + rng.normal(0, np.sqrt(var))
    slope, icept, se = weighted_slope(x, y, np.diag(var))
    fit = sm.WLS(y, sm.add_constant(x), weights=1 / var).fit(cov_type="fixed scale")
    assert slope == pytest.approx(fit.params[1], rel=1e-10)
    assert icept == pytest.approx(fit.params[0], rel=1e-10)
    assert se == pytest.approx(fit.bse[1], rel=1e-8)


def test_curvature_pvalue_detects_quadratic():
    x = np.linspace(0, 4, 9)
    cov = np.eye(9) * 1e-4
    assert curvature_pvalue(x, 2 * x + 1, cov) > 0.5
    assert curvature_pvalue(x, 0.3 * x**2, cov) < 1e-6


def test_bootstrap_reproducible():
    a = np.arange(100.0)
    r1 = bootstrap(np.mean, [a], 50, np.random.default_rng(3))
    r2 = bootstrap(np.mean, [a], 50, np.random.default_rng(3))
    assert np.array_equal(r1, r2)
    assert r1.std() == pytest.approx(a.std() / 10, rel=0.4)
