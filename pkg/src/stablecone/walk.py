"""Killed random walks in a cone: exit times, survival curves, V and kappa.

Paths are simulated in fixed chunks of path indices.  The random numbers of
path ``i`` are a function of ``(seed, stream tag, i, step)`` only, so results
do not depend on the chunk schedule or on the number of threads.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .cone import ConeSpec, contains
from .rng import Stream
from .stable import IncrementLaw
from .stats import Z95, log_survival_cov, mean_se, ratio_influence, wilson_interval

CHUNK = 4096


def default_threads() -> int:
    env = os.environ.get("STABLECONE_THREADS")
    return int(env) if env else (os.cpu_count() or 1)


def run_chunked(n: int, work, threads=None, chunk: int = CHUNK):
    """Call work(i0, i1) over [0, n) in fixed-size chunks."""
    bounds = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    threads = default_threads() if threads is None else int(threads)
    if threads <= 1 or len(bounds) == 1:
        for i0, i1 in bounds:
            work(i0, i1)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # consume the iterator so worker exceptions surface here
        list(pool.map(lambda b: work(*b), bounds))


@dataclass
class WalkConfig:
    """What to simulate: cone, increment law, start point, horizon, replications."""

    cone: ConeSpec
    law: IncrementLaw
    start: np.ndarray
    horizon: int
    reps: int
    seed: int = 0
    stream_tag: str = "walk"

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float).reshape(-1)
        if self.start.size != self.cone.dim or self.law.dim != self.cone.dim:
            raise ValueError("start, law and cone must share the dimension")
        if not contains(self.cone, self.start):
            raise ValueError(f"start {self.start.tolist()} is not inside the cone")
        if int(self.horizon) < 1 or int(self.reps) < 1:
            raise ValueError("horizon and reps must be at least 1")
        self.horizon = int(self.horizon)
        self.reps = int(self.reps)

    @property
    def alpha(self):
        return self.law.alpha

    def stream(self) -> Stream:
        return Stream(self.seed, ("walk", self.stream_tag))

    def with_start(self, start) -> "WalkConfig":
        return WalkConfig(self.cone, self.law, start, self.horizon, self.reps, self.seed,
                          self.stream_tag)


@dataclass
class ExitRecord:
    path_index: int
    tau: int
    censored: bool
    final_position: np.ndarray
    running_max: float


@dataclass
class WalkBatch:
    """Per-path output of one simulation pass.

    ``tau`` equals horizon + 1 for censored paths.  ``cp_pos[i, j]`` is the
    position at step ``checkpoints[j]`` (NaN once the path is dead) and
    ``cp_max`` the running max of the modulus up to that step.
    """

    horizon: int
    tau: np.ndarray
    checkpoints: np.ndarray
    cp_pos: np.ndarray
    cp_max: np.ndarray
    last_pos: np.ndarray
    last_max: np.ndarray

    @property
    def reps(self) -> int:
        return self.tau.size

    def alive(self, n: int) -> np.ndarray:
        return self.tau > n


def simulate_walks(cfg: WalkConfig, checkpoints=(), threads=None, starts=None,
                   path0: int = 0, stream: Stream | None = None) -> WalkBatch:
    """Simulate ``cfg.reps`` killed paths (or one per row of ``starts``)."""
    stream = cfg.stream() if stream is None else stream
    if starts is None:
        starts = np.broadcast_to(cfg.start, (cfg.reps, cfg.cone.dim))
    starts = np.ascontiguousarray(starts, dtype=float)
    n, d = starts.shape
    cps = np.asarray(sorted(int(c) for c in checkpoints), dtype=np.int64)
    if cps.size and (cps[0] < 0 or cps[-1] > cfg.horizon):
        raise ValueError("checkpoints must lie in [0, horizon]")
    tau = np.empty(n, dtype=np.int64)
    cp_pos = np.empty((n, cps.size, d))
    cp_max = np.empty((n, cps.size))
    last_pos = np.empty((n, d))
    last_max = np.empty(n)
    code, lawp, tab = cfg.law.kernel_args()
    k0, k1 = stream.key

    def work(i0, i1):
        _kernels.simulate_chunk(starts[i0:i1], path0 + i0, k0, k1, code, lawp, tab,
                                cfg.cone.cos_theta, cfg.horizon, cps, tau[i0:i1],
                                cp_pos[i0:i1], cp_max[i0:i1], last_pos[i0:i1],
                                last_max[i0:i1])

    run_chunked(n, work, threads)
    return WalkBatch(cfg.horizon, tau, cps, cp_pos, cp_max, last_pos, last_max)


def run_walk_exit(cfg: WalkConfig, path_index: int, stream: Stream | None = None) -> ExitRecord:
    """Exit record of a single path; identical to that path inside any batch run."""
    b = simulate_walks(cfg, starts=cfg.start[None, :], path0=int(path_index), threads=1,
                       stream=stream)
    t = int(b.tau[0])
    return ExitRecord(int(path_index), min(t, cfg.horizon), t > cfg.horizon,
                      b.last_pos[0].copy(), float(b.last_max[0]))


def geometric_horizons(lo: int, hi: int, ratio: int = 2) -> np.ndarray:
    out = [lo]
    while out[-1] * ratio <= hi:
        out.append(out[-1] * ratio)
    return np.asarray(out, dtype=np.int64)


# ----------------------------------------------------------------------------
# survival

@dataclass
class SurvivalTable:
    """P(tau_x > n) on a horizon grid with Wilson 95% intervals."""

    horizons: np.ndarray
    survivors: np.ndarray
    estimates: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    reps: int
    flags: list = field(default_factory=list)
    tau: np.ndarray | None = field(default=None, repr=False)

    def log_cov(self) -> np.ndarray:
        return log_survival_cov(self.estimates, self.reps)

    def rows(self):
        for i in range(self.horizons.size):
            yield (int(self.horizons[i]), int(self.survivors[i]), int(self.reps),
                   float(self.estimates[i]), float(self.ci_lo[i]), float(self.ci_hi[i]))

    HEADER = ("n", "survivors", "reps", "p_hat", "ci_lo", "ci_hi")


def survival_from_tau(tau: np.ndarray, horizons) -> SurvivalTable:
    horizons = np.asarray(horizons, dtype=np.int64)
    if np.any(np.diff(horizons) <= 0):
        raise ValueError("horizons must be strictly increasing")
    reps = tau.size
    # counts[i] = #{tau > n_i}
    sorted_tau = np.sort(tau)
    counts = reps - np.searchsorted(sorted_tau, horizons, side="right")
    lo, hi = wilson_interval(counts, reps)
    flags = [f"no survivors at n={int(n)}" for n, c in zip(horizons, counts) if c == 0]
    return SurvivalTable(horizons, counts.astype(np.int64), counts / reps, lo, hi, reps,
                         flags, tau)


def survival_curve(cfg: WalkConfig, horizons, threads=None, batch: WalkBatch | None = None):
    """Shared-path survival estimates at every horizon in one pass."""
    horizons = np.asarray(horizons, dtype=np.int64)
    if horizons.size == 0 or horizons[0] < 1 or horizons[-1] > cfg.horizon:
        raise ValueError("horizons must lie in [1, cfg.horizon]")
    if batch is None:
        batch = simulate_walks(cfg, threads=threads)
    return survival_from_tau(batch.tau, horizons)


# ----------------------------------------------------------------------------
# the harmonic function V

@dataclass
class HarmonicEstimate:
    """V_m(x) = E[M(x + S(m)); tau_x > m] on a grid of m."""

    x: np.ndarray
    m_grid: np.ndarray
    v_hat: np.ndarray
    se: np.ndarray
    plateau: bool
    plateau_gap: float = float("nan")
    plateau_se: float = float("nan")
    path_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def ci_lo(self):
        return self.v_hat - Z95 * self.se

    @property
    def ci_hi(self):
        return self.v_hat + Z95 * self.se

    @property
    def value(self) -> float:
        return float(self.v_hat[-1])

    HEADER = ("m", "v_hat", "se", "ci_lo", "ci_hi")

    def rows(self):
        for i in range(self.m_grid.size):
            yield (int(self.m_grid[i]), float(self.v_hat[i]), float(self.se[i]),
                   float(self.ci_lo[i]), float(self.ci_hi[i]))


def _masked_values(M_eval, pos):
    """M_eval at the rows of ``pos`` that are not NaN (dead paths give 0)."""
    vals = np.zeros(pos.shape[0])
    live = ~np.isnan(pos[:, 0])
    if live.any():
        vals[live] = M_eval(pos[live])
    return vals


def estimate_V(cfg: WalkConfig, m_grid, M_eval, batch: WalkBatch | None = None, threads=None):
    """Truncated averages of M along killed paths.

    Parameters
    ----------
    cfg : WalkConfig
    m_grid : sequence of int
        Steps at which V_m is reported; 0 gives M_eval(x) exactly.
    M_eval : callable
        Vectorized M on arrays of shape (k, d).
    batch : WalkBatch, optional
        Reuse paths already simulated with these checkpoints.

    The plateau verdict compares the two largest m on the same paths.
    """
    m_grid = np.asarray(sorted(int(m) for m in m_grid), dtype=np.int64)
    if batch is None or not np.all(np.isin(m_grid, batch.checkpoints)):
        batch = simulate_walks(cfg, checkpoints=m_grid, threads=threads)
    cols = np.searchsorted(batch.checkpoints, m_grid)
    values = [_masked_values(M_eval, batch.cp_pos[:, c, :]) for c in cols]
    stats = [mean_se(v) for v in values]
    v_hat = np.array([s[0] for s in stats])
    se = np.array([s[1] for s in stats])
    plateau, gap, gap_se = True, float("nan"), float("nan")
    if m_grid.size >= 2:
        gap, gap_se = mean_se(values[-1] - values[-2])
        plateau = abs(gap) <= Z95 * gap_se
    return HarmonicEstimate(cfg.start.copy(), m_grid, v_hat, se, bool(plateau), gap, gap_se,
                            values[-1])


def harmonicity_residual(cfg: WalkConfig, x, m_star: int, inner_reps: int, outer_reps: int,
                         M_eval, threads=None, seed_tag: str = "harmonicity"):
    """V_m(x) - E[V_m(x + S(1)); tau_x > 1] by nested Monte Carlo.

    The first term uses ``outer_reps * inner_reps`` fresh paths from x.  For
    the second, ``outer_reps`` one-step successors are drawn, and V_m at each
    surviving successor is estimated from ``inner_reps`` independent paths.
    Returns a dict with the residual, its SE and both terms.
    """
    x = np.asarray(x, dtype=float)
    base = Stream(cfg.seed, (seed_tag,))
    total = outer_reps * inner_reps
    direct_cfg = WalkConfig(cfg.cone, cfg.law, x, m_star, total, cfg.seed)
    direct = simulate_walks(direct_cfg, checkpoints=[m_star], threads=threads,
                            stream=base.spawn("direct"))
    v_direct = _masked_values(M_eval, direct.cp_pos[:, 0, :])

    step_cfg = WalkConfig(cfg.cone, cfg.law, x, 1, outer_reps, cfg.seed)
    first = simulate_walks(step_cfg, checkpoints=[1], threads=threads,
                           stream=base.spawn("first_step"))
    succ = first.cp_pos[:, 0, :]
    alive = ~np.isnan(succ[:, 0])
    starts = np.repeat(np.where(alive[:, None], succ, x[None, :]), inner_reps, axis=0)
    inner_cfg = WalkConfig(cfg.cone, cfg.law, x, m_star, total, cfg.seed)
    inner = simulate_walks(inner_cfg, checkpoints=[m_star], threads=threads, starts=starts,
                           stream=base.spawn("inner"))
    v_inner = _masked_values(M_eval, inner.cp_pos[:, 0, :]).reshape(outer_reps, inner_reps)
    per_outer = np.where(alive, v_inner.mean(axis=1), 0.0)

    a, se_a = mean_se(v_direct)
    b, se_b = mean_se(per_outer)
    resid = a - b
    se = math.hypot(se_a, se_b)
    flags = []
    # inner noise dominating the between-successor spread makes the SE unreliable
    within = v_inner[alive].var(axis=1, ddof=1).mean() / inner_reps if alive.any() else 0.0
    if within > 0.9 * per_outer.var(ddof=1):
        flags.append("inner-estimate variance dominates")
    return {"residual": resid, "se": se, "v_direct": a, "v_direct_se": se_a,
            "v_nested": b, "v_nested_se": se_b, "flags": flags}


# ----------------------------------------------------------------------------
# the plateau constant kappa

@dataclass
class KappaEstimate:
    """kappa(n) = n^{beta/alpha} P(tau_x > n) / V(x) and its top-decade plateau."""

    horizons: np.ndarray
    kappa: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    plateau: float
    plateau_se: float
    drift: float
    flags: list
    influence: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_plateau(self) -> bool:
        return not self.flags

    HEADER = ("n", "kappa_hat", "ci_lo", "ci_hi")

    def rows(self):
        for i in range(self.horizons.size):
            yield (int(self.horizons[i]), float(self.kappa[i]), float(self.ci_lo[i]),
                   float(self.ci_hi[i]))


def estimate_kappa(cfg: WalkConfig, survival: SurvivalTable, v_hat: HarmonicEstimate,
                   beta_hat: float, max_drift: float = 0.10) -> KappaEstimate:
    """Plateau constant from a survival curve and V estimated on the same paths.

    The plateau is the mean of kappa(n) over the top decade n >= n_max/10,
    its CI comes from path-level influence values (delta method), and the
    drift is (max - min)/mean over that decade.
    """
    if survival.tau is None or v_hat.path_values is None:
        raise ValueError("estimate_kappa needs path-level survival and V data")
    if survival.tau.size != v_hat.path_values.size:
        raise ValueError("survival and V must come from the same paths")
    expo = beta_hat / cfg.alpha
    n = survival.horizons.astype(float)
    scale = n**expo
    v = float(v_hat.path_values.mean())
    kappa = scale * survival.estimates / v
    se_p = np.sqrt(survival.estimates * (1 - survival.estimates) / survival.reps)
    rel = np.sqrt((se_p / np.maximum(survival.estimates, 1e-300)) ** 2
                  + (v_hat.se[-1] / v) ** 2)
    lo, hi = kappa * (1 - Z95 * rel), kappa * (1 + Z95 * rel)

    top = n >= n[-1] / 10.0
    a = np.zeros(survival.tau.size)
    for h, s in zip(survival.horizons[top], scale[top]):
        a += s * (survival.tau > h)
    a /= top.sum()
    plateau, infl = ratio_influence(a, v_hat.path_values)
    plateau_se = float(infl.std(ddof=1) / math.sqrt(infl.size))
    k_top = kappa[top]
    drift = float((k_top.max() - k_top.min()) / k_top.mean())
    flags = list(survival.flags)
    if drift > max_drift:
        flags.append(f"kappa drift {drift:.3f} over the top decade exceeds {max_drift}")
    if np.any(kappa <= 0):
        flags.append("non-positive kappa at some horizon")
    return KappaEstimate(survival.horizons, kappa, lo, hi, float(plateau), plateau_se, drift,
                         flags, infl)


def compare_kappa(k1: KappaEstimate, k2: KappaEstimate, paired: bool = False):
    """Difference of two plateaus with its joint SE (paired when paths are shared)."""
    diff = k1.plateau - k2.plateau
    if paired:
        d = k1.influence - k2.influence
        se = float(d.std(ddof=1) / math.sqrt(d.size))
    else:
        se = math.hypot(k1.plateau_se, k2.plateau_se)
    return diff, se
