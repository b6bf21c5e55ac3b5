import math

import numpy as np
import pytest
from scipy import special

from stablecone.cone import ConeSpec, contains
from stablecone.martin import halfspace_martin
from stablecone.stable import IncrementLaw, StableParams
from stablecone.walk import (WalkConfig, compare_kappa, estimate_kappa, estimate_V,
                             geometric_horizons, harmonicity_residual, run_walk_exit,
                             simulate_walks, survival_curve, survival_from_tau)


def _cfg(alpha=1.5, d=2, theta=math.pi / 2, start=None, horizon=64, reps=20_000, law="exact",
         seed=0):
    p = StableParams(alpha, d)
    cone = ConeSpec(d, theta)
    lw = IncrementLaw.exact(p) if law == "exact" else IncrementLaw.perturbed(p)
    start = cone.axis if start is None else start
    return WalkConfig(cone, lw, start, horizon, reps, seed)


def _sparre_andersen(n):
    return special.comb(2 * n, n) / 4.0**n


@pytest.mark.parametrize("alpha,d,law", [(1.5, 1, "exact"), (0.7, 1, "exact"),
                                         (1.5, 2, "exact"), (1.5, 2, "perturbed"),
                                         (0.7, 3, "exact")])
def test_halfspace_survival_from_the_boundary_is_law_free(alpha, d, law):
    # P(tau > n) from (almost) the origin is C(2n, n) / 4^n for any symmetric continuous walk
    start = np.zeros(d)
    start[-1] = 1e-12
    cfg = _cfg(alpha, d, start=start, horizon=32, reps=200_000, law=law, seed=4)
    st = survival_curve(cfg, [1, 2, 4, 8, 16, 32])
    for n, p in zip(st.horizons, st.estimates):
        q = _sparre_andersen(int(n))
        assert abs(p - q) < 4 * math.sqrt(q * (1 - q) / st.reps)


def test_thread_count_does_not_change_paths():
    cfg = _cfg(reps=10_000, horizon=128)
    a = simulate_walks(cfg, checkpoints=[0, 5, 128], threads=1)
    b = simulate_walks(cfg, checkpoints=[0, 5, 128], threads=4)
    assert np.array_equal(a.tau, b.tau)
    assert np.array_equal(a.cp_pos, b.cp_pos, equal_nan=True)
    assert np.array_equal(a.last_max, b.last_max)


def test_single_path_replay_matches_batch():
    cfg = _cfg(reps=5000, horizon=64, theta=math.pi / 4)
    batch = simulate_walks(cfg)
    for i in (0, 17, 4999):
        rec = run_walk_exit(cfg, i)
        assert rec.tau == min(int(batch.tau[i]), cfg.horizon)
        assert rec.censored == (batch.tau[i] > cfg.horizon)
        assert np.array_equal(rec.final_position, batch.last_pos[i])


def test_checkpoints_and_killing_consistent():
    cfg = _cfg(theta=math.pi / 3, reps=5000, horizon=50)
    b = simulate_walks(cfg, checkpoints=[0, 10, 50])
    assert np.allclose(b.cp_pos[:, 0, :], cfg.start)
    for j, n in enumerate([0, 10, 50]):
        alive = b.tau > n
        assert np.all(np.isnan(b.cp_pos[~alive, j, 0]))
        assert np.all(contains(cfg.cone, b.cp_pos[alive, j, :]))
        # running max bounds the current modulus
        assert np.all(b.cp_max[alive, j] >= np.linalg.norm(b.cp_pos[alive, j], axis=1) - 1e-12)


def test_survival_from_tau_counts():
    tau = np.array([1, 2, 2, 5, 9, 9, 11])
    st = survival_from_tau(tau, [1, 2, 5, 10])
    assert st.survivors.tolist() == [6, 4, 3, 1]
    assert np.all(st.ci_lo <= st.estimates) and np.all(st.estimates <= st.ci_hi)
    with pytest.raises(ValueError):
        survival_from_tau(tau, [5, 2])
    assert list(st.rows())[0][:3] == (1, 6, 7)


def test_geometric_horizons():
    assert geometric_horizons(64, 1024).tolist() == [64, 128, 256, 512, 1024]


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(start=[0.0, -1.0])
    with pytest.raises(ValueError):
        _cfg(start=[1.0, 1.0, 1.0])


def test_v_estimate_at_zero_steps_is_m_and_plateaus():
    p = StableParams(1.5, 2)
    cfg = _cfg(start=[0.0, 2.0], reps=100_000, horizon=64)
    v = estimate_V(cfg, [0, 32, 64], halfspace_martin(p))
    assert v.v_hat[0] == pytest.approx(2.0**0.75)
    assert v.se[0] < 1e-15
    # M is subharmonic for the killed walk (f >= 0), so V_m grows with m
    assert v.v_hat[1] > v.v_hat[0]
    assert v.v_hat[2] > v.v_hat[1] - 3 * v.plateau_se


def test_harmonicity_residual_small():
    p = StableParams(1.5, 2)
    cfg = _cfg(start=[0.0, 2.0], reps=10, horizon=16)
    h = harmonicity_residual(cfg, [0.0, 2.0], 16, 16, 2000, halfspace_martin(p))
    assert abs(h["residual"]) < 4 * h["se"]


def test_kappa_plateau_and_comparison():
    p = StableParams(1.5, 2)
    M = halfspace_martin(p)
    hz = geometric_horizons(64, 1024)
    ests = []
    for x in ([0.0, 1.0], [0.0, 2.0]):
        cfg = _cfg(start=x, reps=40_000, horizon=1024)
        b = simulate_walks(cfg, checkpoints=[32, 64])
        v = estimate_V(cfg, [32, 64], M, batch=b)
        ests.append(estimate_kappa(cfg, survival_from_tau(b.tau, hz), v, 0.75, max_drift=0.5))
    for k in ests:
        assert k.kappa.shape == hz.shape and k.plateau > 0 and k.plateau_se > 0
    diff, se = compare_kappa(*ests)
    assert se == pytest.approx(math.hypot(ests[0].plateau_se, ests[1].plateau_se))
    with pytest.raises(ValueError):
        estimate_kappa(_cfg(), survival_from_tau(np.array([1, 2]), [1]), v, 0.75)
