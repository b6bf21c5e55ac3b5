"""Walks conditioned to stay in the cone: rejection sampling and checks.

Conditioned paths are obtained by plain rejection: simulate, keep those with
tau_x > n.  Paths are proposed in fixed blocks of path indices and the first
``target`` survivors in path-index order are kept, so the sample does not
depend on the thread count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy import stats as sps

from .cone import axis_angle
from .rng import Stream
from .stats import bootstrap
from .walk import WalkConfig, simulate_walks

BLOCK = 16_384


@dataclass
class MeanderSample:
    """Scaled skeletons (x + S(floor(n t))) / n^{1/alpha} of accepted paths."""

    n: int
    alpha: float
    t_grid: np.ndarray
    paths: np.ndarray
    scaled_max: np.ndarray
    path_index: np.ndarray
    accepted: int
    proposed: int
    flags: list = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")

    @property
    def endpoints(self) -> np.ndarray:
        return self.paths[:, -1, :]

    HEADER_PREFIX = ("path_index", "t")

    def rows(self):
        d = self.paths.shape[2]
        for i in range(self.accepted):
            for j, t in enumerate(self.t_grid):
                yield (int(self.path_index[i]), float(t)) + tuple(
                    float(self.paths[i, j, k]) for k in range(d))


def sample_conditioned(cfg: WalkConfig, n: int, k_grid: int = 16, target: int = 2000,
                       threads=None, stream: Stream | None = None) -> MeanderSample:
    """Rejection sampling of paths with tau_x > n.

    Proposals are drawn in blocks until ``target`` survivors are found or
    ``cfg.reps`` proposals are used (then the sample is flagged as partial).
    ``proposed`` counts paths up to and including the last accepted one.
    """
    if n > cfg.horizon:
        raise ValueError("n must not exceed cfg.horizon")
    if target < 100:
        raise ValueError("target must be at least 100")
    t_grid = np.arange(k_grid + 1) / k_grid
    steps = np.floor(n * t_grid).astype(np.int64)
    uniq, inverse = np.unique(steps, return_inverse=True)
    run_cfg = WalkConfig(cfg.cone, cfg.law, cfg.start, n, cfg.reps, cfg.seed, cfg.stream_tag)
    stream = run_cfg.stream() if stream is None else stream
    scale = n ** (1.0 / cfg.alpha)
    kept_paths, kept_max, kept_idx = [], [], []
    have = 0
    offset = 0
    while have < target and offset < cfg.reps:
        m = min(BLOCK, cfg.reps - offset)
        starts = np.broadcast_to(cfg.start, (m, cfg.cone.dim))
        b = simulate_walks(run_cfg, checkpoints=uniq, threads=threads, starts=starts,
                           path0=offset, stream=stream)
        ok = np.flatnonzero(b.tau > n)[: target - have]
        kept_paths.append(b.cp_pos[ok][:, inverse, :] / scale)
        kept_max.append(b.last_max[ok] / scale)
        kept_idx.append(ok + offset)
        have += ok.size
        offset += m
    paths = np.concatenate(kept_paths) if kept_paths else np.empty((0, k_grid + 1, cfg.cone.dim))
    idx = np.concatenate(kept_idx) if kept_idx else np.empty(0, dtype=np.int64)
    flags = []
    if have < target:
        flags.append(f"partial sample: {have} of {target} accepted after {cfg.reps} proposals")
        proposed = offset
    else:
        proposed = int(idx[-1]) + 1
    return MeanderSample(n, cfg.alpha, t_grid, paths,
                         np.concatenate(kept_max) if kept_max else np.empty(0), idx,
                         int(have), int(proposed), flags)


def endpoint_stats(s: MeanderSample, quantiles=(0.1, 0.25, 0.5, 0.75, 0.9), n_bins: int = 12):
    """Radial quantiles, angular histogram and max-modulus quantiles at t = 1."""
    if s.accepted < 100:
        raise ValueError("need at least 100 accepted paths")
    end = s.endpoints
    rad = np.linalg.norm(end, axis=1)
    ang = axis_angle(end)
    theta_max = float(ang.max()) if ang.size else 0.0
    hist, edges = np.histogram(ang, bins=n_bins, range=(0.0, max(theta_max, 1e-12)))
    return {
        "quantiles": list(quantiles),
        "radius_quantiles": np.quantile(rad, quantiles).tolist(),
        "max_quantiles": np.quantile(s.scaled_max, quantiles).tolist(),
        "angle_histogram": hist.tolist(),
        "angle_edges": edges.tolist(),
        "max_angle": theta_max,
        "median_radius": float(np.median(rad)),
    }


def median_radius_ci(s: MeanderSample, stream: Stream, n_boot: int = 500):
    """Bootstrap percentile CI of the median scaled endpoint radius."""
    rad = np.linalg.norm(s.endpoints, axis=1)
    reps = bootstrap(np.median, [rad], n_boot, stream.generator())
    return float(np.median(rad)), tuple(np.quantile(reps, [0.025, 0.975]).tolist())


def ks_two_sample(a, b):
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.

    The statistic is sup |F_a - F_b| over the pooled sample with both
    empirical CDFs right-continuous, so tied values across samples are
    handled by evaluating both CDFs after the whole tie group (the mid-rank
    convention leaves the supremum unchanged).  The p-value uses the
    limiting Kolmogorov law with the Stephens small-sample correction.
    """
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    na, nb = a.size, b.size
    if na < 50 or nb < 50:
        raise ValueError("samples must have at least 50 points each")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / na
    fb = np.searchsorted(b, pooled, side="right") / nb
    stat = float(np.max(np.abs(fa - fb)))
    en = math.sqrt(na * nb / (na + nb))
    p = float(special.kolmogorov((en + 0.12 + 0.11 / en) * stat))
    return stat, min(max(p, 0.0), 1.0)


def invariance_check(cfg_a: WalkConfig, cfg_b: WalkConfig, n: int, target: int = 2000,
                     k_grid: int = 16, level: float = 0.01, threads=None):
    """KS comparison of two laws' scaled conditioned endpoints.

    Projections: endpoint radius and max modulus.  Bonferroni over the two
    tests: pass iff both p-values exceed ``level`` / 2 is replaced by the
    equivalent adjusted form min(2 p) > level.
    """
    if cfg_a.cone != cfg_b.cone or not np.allclose(cfg_a.start, cfg_b.start):
        raise ValueError("both configurations need the same cone and start")
    sa = sample_conditioned(cfg_a, n, k_grid, target, threads)
    if cfg_b is cfg_a:
        sb = sa
    else:
        sb = sample_conditioned(cfg_b, n, k_grid, target, threads)
    tests = {
        "radius": ks_two_sample(np.linalg.norm(sa.endpoints, axis=1),
                                np.linalg.norm(sb.endpoints, axis=1)),
        "max_modulus": ks_two_sample(sa.scaled_max, sb.scaled_max),
    }
    adjusted = {k: min(1.0, 2.0 * v[1]) for k, v in tests.items()}
    verdict = all(p > level for p in adjusted.values())
    return {"verdict": bool(verdict), "tests": {k: {"statistic": v[0], "p": v[1],
                                                    "p_adjusted": adjusted[k]}
                                                for k, v in tests.items()},
            "flags": sa.flags + sb.flags, "samples": (sa, sb)}


def tightness_check(s: MeanderSample, A_grid, beta_hat: float, fit_range=(2.0, 16.0),
                    min_exceed: int = 10, n_boot: int = 500, stream: Stream | None = None,
                    tolerance: float = 0.15):
    """Conditional tail of the running max against the power law A^{-(alpha - beta)}.

    Returns the table of P(max_k |x + S(k)| > A n^{1/alpha} | tau > n), the
    fitted log-log slope over ``fit_range`` with a bootstrap CI, and whether
    the slope lies within ``tolerance`` of -(alpha - beta_hat) (``pass``).
    The power law is an upper bound, so ``bound_holds`` separately reports
    whether the fitted decay is at least as fast as it.
    """
    A_grid = np.asarray(A_grid, dtype=float)
    m = s.scaled_max
    counts = np.array([(m > A).sum() for A in A_grid])
    probs = counts / s.accepted
    rows = []
    for A, c, p in zip(A_grid, counts, probs):
        lo, hi = sps.beta.ppf([0.025, 0.975], [c, c + 1], [s.accepted - c + 1, s.accepted - c])
        rows.append({"A": float(A), "exceed": int(c), "p_hat": float(p),
                     "ci_lo": float(0.0 if c == 0 else lo), "ci_hi": float(1.0 if c == s.accepted else hi),
                     "flag": bool(c < min_exceed)})
    use = (A_grid >= fit_range[0]) & (A_grid <= fit_range[1]) & (counts >= min_exceed)
    if use.sum() < 2:
        return {"rows": rows, "slope": float("nan"), "ci": (float("nan"),) * 2,
                "target": -(s.alpha - beta_hat), "pass": False, "bound_holds": False,
                "flags": ["too few exceedances in the fit range"]}
    la = np.log(A_grid[use])

    def slope_of(mx):
        p = np.array([(mx > A).mean() for A in A_grid[use]])
        if np.any(p <= 0):
            return np.nan
        x = la - la.mean()
        y = np.log(p)
        return float(np.sum(x * (y - y.mean())) / np.sum(x * x))

    slope = slope_of(m)
    gen = (stream or Stream(0, ("tightness",))).generator()
    reps = bootstrap(slope_of, [m], n_boot, gen)
    reps = reps[np.isfinite(reps)]
    ci = tuple(np.quantile(reps, [0.025, 0.975]).tolist()) if reps.size else (np.nan, np.nan)
    target = -(s.alpha - beta_hat)
    return {"rows": rows, "slope": slope, "ci": ci, "target": target,
            "pass": bool(abs(slope - target) <= tolerance),
            "bound_holds": bool(slope <= target + tolerance),
            "flags": [f"few exceedances at A={r['A']}" for r in rows if r["flag"]]}
