import math

import numpy as np
import pytest
from scipy import integrate
from scipy import stats as sps

from stablecone.compensator import (CompensatorConfig, GreenHalfspace, UTable, drift_quad,
                                    envelope_check, error_drift_check, error_function_mc,
                                    error_function_quad, green_envelope, green_halfspace,
                                    lambda_weight, random_halfspace_pairs, stable_marginal,
                                    supermartingale_trace, u_lambda_mc, u_lambda_quad, u_table)
from stablecone.rng import Stream
from stablecone.stable import IncrementLaw, StableParams


def _green_by_quadrature(alpha, d, x, y):
    # kappa |x-y|^{alpha-d} int_0^zeta s^{alpha/2-1} (1+s)^{-d/2} ds
    kappa = math.gamma(d / 2) / (2**alpha * math.pi ** (d / 2) * math.gamma(alpha / 2) ** 2)
    r = np.linalg.norm(np.subtract(x, y))
    zeta = 4 * x[-1] * y[-1] / r**2
    val = integrate.quad(lambda s: s ** (alpha / 2 - 1) * (1 + s) ** (-d / 2), 0, zeta,
                         epsabs=0, epsrel=1e-13, limit=200)[0]
    return kappa * r ** (alpha - d) * val


@pytest.mark.parametrize("alpha,d", [(0.7, 1), (1.5, 1), (0.7, 2), (1.5, 2), (1.5, 3)])
def test_green_closed_form_matches_integral(alpha, d):
    g = GreenHalfspace(StableParams(alpha, d))
    rng = np.random.default_rng(d)
    for _ in range(10):
        x, y = rng.normal(size=d), rng.normal(size=d)
        x[-1], y[-1] = abs(x[-1]) + 0.01, abs(y[-1]) + 0.01
        assert green_halfspace(g, x, y) == pytest.approx(_green_by_quadrature(alpha, d, x, y),
                                                         rel=1e-9)
        assert green_halfspace(g, x, y) == pytest.approx(green_halfspace(g, y, x), rel=1e-12)
        assert green_halfspace(g, 3 * x, 3 * y) == pytest.approx(
            3.0 ** (alpha - d) * green_halfspace(g, x, y), rel=1e-9)


def test_green_far_from_boundary_is_riesz_potential():
    p = StableParams(1.5, 3)
    g = GreenHalfspace(p)
    x, y = np.array([0.0, 0.0, 1e6]), np.array([1.0, 0.5, 1e6 + 0.3])
    riesz = g.A * np.linalg.norm(x - y) ** (1.5 - 3)
    assert green_halfspace(g, x, y) == pytest.approx(riesz, rel=1e-5)
    with pytest.raises(ValueError):
        green_halfspace(g, x, x)
    with pytest.raises(ValueError):
        green_halfspace(g, x, -x)


def test_envelope_pairs_and_symmetry():
    p = StableParams(1.5, 2)
    x, y = random_halfspace_pairs(2, 200, Stream(1))
    assert np.all(x[:, -1] >= 0) and np.all(y[:, -1] >= 0)
    assert np.allclose(green_envelope(p, x, y), green_envelope(p, y, x))
    res = envelope_check(p, 200, Stream(1))
    assert res["factor"] >= 1 and np.isfinite(res["factor"])


def test_lambda_weight():
    cfg = CompensatorConfig(StableParams(1.5, 2), 0.5)
    assert lambda_weight(cfg, [0.0, -1.0]) == 0.0
    assert lambda_weight(cfg, [5.0, 3.0]) == pytest.approx(3**0.75 / 4**1.75)
    with pytest.raises(ValueError):
        CompensatorConfig(StableParams(1.5, 2), 2.0)


@pytest.mark.parametrize("alpha,eps", [(1.5, 0.5), (0.7, 0.3)])
def test_u_lambda_quadrature_against_importance_sampling(alpha, eps):
    for d in (1, 2, 3):
        if d <= alpha and d > 1:
            continue
        cfg = CompensatorConfig(StableParams(alpha, d), eps, mc_samples=200_000)
        g = GreenHalfspace(cfg.params)
        for xd in (0.5, 4.0):
            x = np.zeros(d)
            x[-1] = xd
            mc = u_lambda_mc(cfg, g, x, Stream(7, (d, xd)))
            assert abs(mc.value - u_lambda_quad(cfg, x)) < 4 * mc.se


def test_u_table_interpolates_quadrature():
    cfg = CompensatorConfig(StableParams(1.5, 2), 0.5)
    tab = u_table(cfg)
    for t in (1e-3, 0.37, 5.0, 123.0, 4e4):
        assert float(tab(np.array([t]))[0]) == pytest.approx(u_lambda_quad(cfg, [0.0, t]), rel=1e-6)
    assert float(tab(np.array([-1.0]))[0]) == 0.0
    assert isinstance(tab, UTable)


@pytest.mark.parametrize("alpha", [0.7, 1.5])
def test_stable_marginal_matches_scipy(alpha):
    m = stable_marginal(alpha)
    s = np.array([0.0, 0.1, 1.0, 4.0, 15.0, 40.0])
    assert np.allclose(m(s), sps.levy_stable.pdf(s, alpha, 0.0), rtol=5e-6)


@pytest.mark.parametrize("variant", ["exact", "perturbed"])
def test_error_function_two_routes(variant):
    p = StableParams(1.5, 2)
    law = IncrementLaw.exact(p) if variant == "exact" else IncrementLaw.perturbed(p)
    y = np.array([0.0, 3.0])
    q = error_function_quad(law, y)
    mc = error_function_mc(law, y, 400_000, Stream(3, (variant,)))
    # the antithetic estimator has infinite variance in principle; allow a wider band
    assert abs(mc.value - q) < 5 * mc.se


def test_drift_table_inner_against_quadrature():
    p = StableParams(1.5, 2)
    law = IncrementLaw.exact(p)
    cfg = CompensatorConfig(p, 0.5, R=8.0)
    res = error_drift_check(cfg, law, [0.0, 4.0], Stream(2), n_outer=50_000, inner="table")
    exact = drift_quad(cfg, law, [0.0, 12.0])
    assert abs(res.drift - exact) < 4 * res.se
    assert res.delta == 12.0
    assert res.lam == pytest.approx(lambda_weight(cfg, [0.0, 12.0]))


def test_drift_mc_inner_runs_and_controls():
    p = StableParams(1.5, 2)
    cfg = CompensatorConfig(p, 0.5, R=8.0)
    res = error_drift_check(cfg, IncrementLaw.exact(p), [0.0, 8.0], Stream(3), n_outer=5000,
                            inner="mc", n_inner=16)
    assert np.isfinite(res.drift) and res.se > 0 and np.isfinite(res.raw_drift)
    with pytest.raises(ValueError):
        error_drift_check(cfg, IncrementLaw.exact(p), [0.0, 8.0], inner="bogus", n_outer=10)


def test_supermartingale_trace_structure():
    p = StableParams(1.5, 2)
    cfg = CompensatorConfig(p, 0.5, R=8.0, c=0.1)
    out = supermartingale_trace(cfg, IncrementLaw.exact(p), [0.0, 4.0], 8, 2000, seed=1)
    assert out["start"].tolist() == [0.0, 12.0]
    assert sum(c["count"] for c in out["cells"]) > 0
    for a in out["audit"]:
        assert a["tau"] <= 8
