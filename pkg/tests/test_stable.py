import math

import numpy as np
import pytest
from scipy import integrate
from scipy import stats as sps

from stablecone.rng import Stream
from stablecone.stable import (IncrementLaw, StableParams, density_difference_bound,
                               exit_radius_cdf, levy_tail_constant, poisson_ball_density,
                               poisson_mass, poisson_normalization, radial_density,
                               sample_ball_exit, sample_isotropic_increment,
                               sample_positive_stable, sphere_area)


def _levy1(alpha, x):
    # symmetric stable with characteristic function exp(-|t|^alpha)
    return sps.levy_stable.pdf(x, alpha, 0.0)


def test_params_validation():
    with pytest.raises(ValueError, match="alpha = 1"):
        StableParams(1.0, 2)
    with pytest.raises(ValueError):
        StableParams(2.0, 2)
    with pytest.raises(ValueError):
        StableParams(1.5, 0)


@pytest.mark.parametrize("alpha", [0.7, 1.5])
def test_radial_density_one_dim_matches_scipy(alpha):
    p = StableParams(alpha, 1)
    for x in (0.0, 0.3, 1.0, 2.5, 7.0):
        assert radial_density(p, x, rtol=1e-9) == pytest.approx(_levy1(alpha, x), rel=2e-6)


@pytest.mark.parametrize("alpha", [0.7, 1.5])
def test_radial_density_three_dim_from_one_dim(alpha):
    # isotropic laws satisfy p_3(r) = -p_1'(r) / (2 pi r)
    p3 = StableParams(alpha, 3)
    p1 = StableParams(alpha, 1)
    for r in (0.5, 1.0, 3.0):
        h = 1e-3 * r
        deriv = (radial_density(p1, r + h, rtol=1e-11) - radial_density(p1, r - h, rtol=1e-11)) / (2 * h)
        assert radial_density(p3, r, rtol=1e-9) == pytest.approx(-deriv / (2 * math.pi * r), rel=1e-5)


@pytest.mark.parametrize("alpha,d", [(0.7, 2), (1.5, 2), (1.5, 3)])
def test_radial_cdf_matches_sampler(alpha, d):
    # two routes to P(|Z| < q): quadrature of the density and the subordinated-Gaussian sampler
    p = StableParams(alpha, d)
    rad = np.linalg.norm(sample_isotropic_increment(p, Stream(9, (alpha, d)), 400_000), axis=1)
    f = lambda r: sphere_area(d) * r ** (d - 1) * radial_density(p, r, rtol=1e-8)
    for q in (0.5, 1.0, 3.0):
        cdf = integrate.quad(f, 0, q, limit=200)[0]
        emp = (rad < q).mean()
        assert abs(emp - cdf) < 4 * math.sqrt(cdf * (1 - cdf) / rad.size)


@pytest.mark.parametrize("alpha,d", [(0.7, 2), (1.5, 2), (1.5, 3)])
def test_radial_density_power_tail(alpha, d):
    p = StableParams(alpha, d)
    gaps = [abs(r ** (d + alpha) * radial_density(p, r) / levy_tail_constant(p) - 1.0)
            for r in (25.0, 50.0, 100.0, 200.0)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.03


@pytest.mark.parametrize("alpha", [0.7, 1.5])
def test_positive_stable_laplace_transform(alpha):
    a = sample_positive_stable(alpha / 2, Stream(1, ("ps",)), 200_000)
    for lam in (1.0, 2.0, 4.0):
        v = np.exp(-lam * a)
        se = v.std() / math.sqrt(v.size)
        assert abs(v.mean() - math.exp(-lam ** (alpha / 2))) < 4 * se


@pytest.mark.parametrize("alpha,d", [(0.7, 2), (1.5, 2), (1.5, 3)])
def test_increment_characteristic_function(alpha, d):
    z = sample_isotropic_increment(StableParams(alpha, d), Stream(2, ("inc",)), 200_000)
    rng = np.random.default_rng(0)
    for k in (0.5, 1.0, 2.0):
        xi = rng.normal(size=d)
        xi *= k / np.linalg.norm(xi)
        c = np.cos(z @ xi)
        se = c.std() / math.sqrt(c.size)
        assert abs(c.mean() - math.exp(-k**alpha)) < 4 * se


def test_one_coordinate_is_one_dim_stable():
    z = sample_isotropic_increment(StableParams(1.5, 2), Stream(3), 50_000)
    # a projection of the isotropic law keeps the exponent |t|^alpha
    assert sps.kstest(z[:, 1], lambda x: sps.levy_stable.cdf(x, 1.5, 0.0)).pvalue > 1e-3


def test_perturbed_law_density_and_bound():
    p = StableParams(1.5, 2)
    law = IncrementLaw.perturbed(p)
    assert 0 < law.eps_pert < law.positivity_threshold
    f = lambda r: 2 * math.pi * r * float(law.density(np.array([0.0, r])))
    mass = (integrate.quad(f, 0, 1, limit=200)[0] + integrate.quad(f, 1, 2, limit=200)[0]
            + integrate.quad(f, 2, 50, limit=400)[0])
    tail = sphere_area(2) * levy_tail_constant(p) * 50.0 ** -1.5 / 1.5
    assert mass + tail == pytest.approx(1.0, abs=1e-3)
    assert density_difference_bound(law, [0.0, 2.5]) == 0.0
    assert density_difference_bound(law, [0.0, 0.5]) == pytest.approx(law.eps_pert * law.phi1_value)
    with pytest.raises(ValueError):
        IncrementLaw.perturbed(p, eps_pert=10 * law.positivity_threshold)


def test_perturbed_sampler_matches_density():
    p = StableParams(1.5, 2)
    law = IncrementLaw.perturbed(p)
    x = sample_isotropic_increment(law, Stream(4), 100_000)
    rad = np.linalg.norm(x, axis=1)
    f = lambda r: 2 * math.pi * r * float(law.density(np.array([0.0, r])))
    for q in (0.5, 1.0, 1.5, 3.0):
        expected = integrate.quad(f, 0, q, points=[1.0, 2.0], limit=200)[0]
        emp = (rad < q).mean()
        assert abs(emp - expected) < 4 * math.sqrt(expected * (1 - expected) / rad.size)


@pytest.mark.parametrize("alpha,d", [(0.7, 1), (0.7, 2), (1.5, 2), (1.5, 3)])
def test_poisson_kernel_normalization(alpha, d):
    p = StableParams(alpha, d)
    for r, off in [(1.0, 0.0), (0.5, 0.25), (2.0, 1.8)]:
        theta = np.zeros(d)
        theta[-1] = off
        assert abs(poisson_normalization(p, r, theta) - 1.0) < 1e-6


def test_poisson_kernel_integrates_to_one_by_direct_quadrature():
    # a second route in d = 2: polar quadrature of the density itself
    p = StableParams(1.5, 2)
    theta = np.array([0.0, 0.4])

    def inner(rho):
        f = lambda phi: float(poisson_ball_density(p, 1.0, theta,
                                                   rho * np.array([math.sin(phi), math.cos(phi)])))
        return rho * integrate.quad(f, 0, 2 * math.pi, limit=200, epsabs=1e-13)[0]

    total = 0.0
    for a, b in [(1.0, 1.001), (1.001, 1.1), (1.1, 3.0), (3.0, 100.0), (100.0, np.inf)]:
        total += integrate.quad(inner, a, b, limit=200, epsabs=1e-13)[0]
    assert total == pytest.approx(1.0, abs=1e-4)


def test_centred_exit_radius_law():
    p = StableParams(1.5, 2)
    for rho in (1.2, 2.0, 10.0):
        assert poisson_mass(p, 1.0, np.zeros(2), rho) == pytest.approx(
            float(exit_radius_cdf(p, rho)), abs=1e-9)
    w = sample_ball_exit(p, 1.0, np.zeros(2), Stream(5), 50_000)
    rad = np.linalg.norm(w, axis=1)
    assert rad.min() >= 1.0 and np.isfinite(rad).all()
    assert sps.kstest(rad, lambda x: exit_radius_cdf(p, x)).pvalue > 1e-3


@pytest.mark.parametrize("alpha", [0.7, 1.5])
def test_off_centre_exit_preserves_riesz_potential(alpha):
    # |w - z|^{alpha - d} is harmonic away from z, so its mean at exit equals its value at theta
    d = 2
    p = StableParams(alpha, d)
    theta = np.array([0.3, -0.4])
    z = np.array([0.0, 2.5])
    w = sample_ball_exit(p, 1.0, theta, Stream(6, (alpha,)), 200_000)
    h = np.linalg.norm(w - z, axis=1) ** (alpha - d)
    se = h.std() / math.sqrt(h.size)
    target = np.linalg.norm(theta - z) ** (alpha - d)
    assert abs(h.mean() - target) < 4 * se


def test_ball_exit_validation():
    p = StableParams(1.5, 2)
    with pytest.raises(ValueError):
        sample_ball_exit(p, 1.0, np.array([0.0, 1.0]), Stream(0))
    with pytest.raises(ValueError):
        poisson_ball_density(p, 1.0, np.zeros(2), np.array([[0.0, 0.5]]))
