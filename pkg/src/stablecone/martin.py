"""The Martin kernel M of a cone: closed form, survival-ratio estimates, checks.

M is normalized by M(e_d) = 1.  In the half-space M(x) = x_d^{alpha/2}.  For
other apertures M and its homogeneity index beta are estimated from
survival probabilities of the killed walk.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .cone import ConeSpec, axis_angle, contains, dist_to_boundary, sample_interior_grid
from .rng import as_stream
from .stable import IncrementLaw, StableParams, sample_ball_exit
from .stats import Z95, curvature_pvalue, mean_se, weighted_slope
from .walk import SurvivalTable, WalkConfig, geometric_horizons, simulate_walks, survival_from_tau

MIN_SURVIVORS = 50


def eval_martin_halfspace(params: StableParams, x) -> np.ndarray:
    """x_d^{alpha/2} on the upper half-space, 0 elsewhere."""
    x = np.asarray(x, dtype=float)
    xd = x[..., -1]
    out = np.where(xd > 0, np.maximum(xd, 0.0) ** (params.alpha / 2), 0.0)
    return float(out) if out.ndim == 0 else out


def halfspace_martin(params: StableParams):
    """Vectorized closed-form M, usable as ``M_eval``."""
    return lambda y: eval_martin_halfspace(params, y)


# ----------------------------------------------------------------------------
# the index beta

@dataclass
class BetaEstimate:
    beta_hat: float
    se: float
    slope: float
    curvature_p: float
    survival: SurvivalTable
    fit_horizons: np.ndarray
    flags: list = field(default_factory=list)
    widened: bool = False

    @property
    def ci(self):
        return (self.beta_hat - Z95 * self.se, self.beta_hat + Z95 * self.se)


def beta_from_survival(survival: SurvivalTable, alpha: float, drop_fraction: float = 0.2):
    """Slope fit of log P(tau > n) on log n, returning a BetaEstimate.

    The smallest ``drop_fraction`` of horizons are dropped, as are horizons
    with fewer than MIN_SURVIVORS survivors (which also widens the CI, since
    the fit then rests on fewer points).  Weights are the inverse variances
    of log p_hat; the slope variance uses the full covariance of log p_hat
    induced by sharing paths across horizons.
    """
    h = survival.horizons
    k = int(math.floor(drop_fraction * h.size))
    use = np.arange(h.size) >= k
    flags = []
    widened = False
    thin = survival.survivors < MIN_SURVIVORS
    if np.any(thin & use):
        flags.append(f"fewer than {MIN_SURVIVORS} survivors at the largest horizons; CI widened")
        widened = True
        use &= ~thin
    if use.sum() < 3:
        raise ValueError("not enough usable horizons for the slope fit")
    x = np.log(h[use].astype(float))
    y = np.log(survival.estimates[use])
    cov = survival.log_cov()[np.ix_(use, use)]
    slope, _, slope_se = weighted_slope(x, y, cov)
    top = use & (h >= h[use][-1] / 10.0)
    curv = float("nan")
    if top.sum() >= 4:
        curv = curvature_pvalue(np.log(h[top].astype(float)), np.log(survival.estimates[top]),
                                survival.log_cov()[np.ix_(top, top)])
    se = slope_se * alpha * (2.0 if widened else 1.0)
    beta = -slope * alpha
    if not 0.0 <= beta < alpha:
        flags.append(f"beta_hat={beta:.4f} outside [0, alpha)")
    return BetaEstimate(beta, se, slope, curv, survival, h[use], flags, widened)


def estimate_beta(cone: ConeSpec, params: StableParams, horizons, reps: int, seed: int = 0,
                  law: IncrementLaw | None = None, threads=None, min_reps: int = 10**5):
    """Index beta from the survival curve of the walk started at e_d.

    Returns beta_hat = -alpha * slope with a delta-method CI.
    """
    horizons = np.asarray(horizons, dtype=np.int64)
    if horizons.size < 5:
        raise ValueError("need a geometric horizon grid with at least 5 points")
    if reps < min_reps:
        raise ValueError(f"reps must be at least {min_reps}")
    law = IncrementLaw.exact(params) if law is None else law
    cfg = WalkConfig(cone, law, cone.axis, int(horizons[-1]), reps, seed)
    batch = simulate_walks(cfg, threads=threads)
    return beta_from_survival(survival_from_tau(batch.tau, horizons), params.alpha)


# ----------------------------------------------------------------------------
# Martin ratios

@dataclass
class MartinRatio:
    """M(x)/M(e_d) from scaled survival ratios."""

    x: np.ndarray
    value: float
    se: float
    raw: dict
    flags: list = field(default_factory=list)
    influence: np.ndarray | None = field(default=None, repr=False)

    @property
    def ci(self):
        return (self.value - Z95 * self.se, self.value + Z95 * self.se)


def _ratio_terms(tau_num, tau_den, horizons):
    """Per-horizon ratios of survival fractions and their path influences."""
    ratios, infl = [], []
    for n in horizons:
        a = (tau_num > n).astype(float)
        b = (tau_den > n).astype(float)
        pb = b.mean()
        if pb == 0:
            ratios.append(np.nan)
            infl.append(np.zeros_like(a))
            continue
        r = a.mean() / pb
        ratios.append(r)
        infl.append((a - r * b) / pb)
    return np.array(ratios), infl


def estimate_martin_ratio(cone: ConeSpec, params: StableParams, x, horizons, reps: int,
                          seed: int = 0, anchor_scale: float = 16.0, extrapolate: bool = False,
                          law: IncrementLaw | None = None, threads=None) -> MartinRatio:
    """M(x)/M(e_d) as a plateau of survival ratios started far from the apex.

    At a finite start the ratio P(tau_x > n)/P(tau_{e_d} > n) converges to
    V(x)/V(e_d), not to the Martin ratio.  Both points are therefore scaled
    by L = ``anchor_scale`` (M is homogeneous, so the target is unchanged)
    and the ratio is averaged over the top decade of horizons.  In the
    half-space the leftover bias is close to c/L and ``extrapolate`` removes
    it by combining the estimates at L and 2L as 2 R(2L) - R(L).  In narrower
    cones the approach is not of that form and extrapolation overshoots, so
    it is off by default.  All starts share the path streams, so the CI
    comes from paired path-level influence values.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if not contains(cone, x):
        raise ValueError("x must lie inside the cone")
    horizons = np.asarray(horizons, dtype=np.int64)
    law = IncrementLaw.exact(params) if law is None else law
    scales = [anchor_scale, 2 * anchor_scale] if extrapolate else [anchor_scale]
    top = horizons >= horizons[-1] / 10.0
    cfg = WalkConfig(cone, law, cone.axis, int(horizons[-1]), reps, seed, "martin-ratio")
    same = np.allclose(x, cone.axis)
    taus = {}

    def tau_at(point):
        key = tuple(np.round(point, 12))
        if key not in taus:
            taus[key] = simulate_walks(cfg.with_start(point), threads=threads).tau
        return taus[key]

    raw, per_scale, flags = {}, [], []
    for L in scales:
        if same:
            raw[L] = np.ones(horizons.size)
            per_scale.append((1.0, np.zeros(reps)))
            continue
        ratios, infl = _ratio_terms(tau_at(L * x), tau_at(L * cone.axis), horizons)
        raw[L] = ratios
        sel = np.flatnonzero(top & np.isfinite(ratios))
        if sel.size == 0:
            raise ValueError("no survivors at the top horizons")
        value = float(np.mean(ratios[sel]))
        psi = np.mean([infl[i] for i in sel], axis=0)
        per_scale.append((value, psi))
        # plateau: last two horizons compared on the same paths
        if sel.size >= 2:
            d = infl[sel[-1]] - infl[sel[-2]]
            gap = ratios[sel[-1]] - ratios[sel[-2]]
            gap_se = d.std(ddof=1) / math.sqrt(d.size)
            if abs(gap) > Z95 * gap_se:
                flags.append(f"ratio still trending at scale {L}: gap {gap:.4g} +- {gap_se:.2g}")
    if extrapolate:
        value = 2.0 * per_scale[1][0] - per_scale[0][0]
        psi = 2.0 * per_scale[1][1] - per_scale[0][1]
    else:
        value, psi = per_scale[0]
    se = float(psi.std(ddof=1) / math.sqrt(psi.size)) if not same else 0.0
    return MartinRatio(x, float(value), se, {float(k): v for k, v in raw.items()}, flags, psi)


# ----------------------------------------------------------------------------
# mean-value and envelope checks

def check_mean_value(cone: ConeSpec, params: StableParams, M_eval, x, r: float, reps: int,
                     stream=None):
    """E[M_eval(exit point of B_r(x))] - M_eval(x) and its standard error.

    M_eval must be defined on all of R^d (0 outside the cone for a Martin
    kernel).  Returns (residual, se).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if not contains(cone, x) or r >= dist_to_boundary(cone, x):
        raise ValueError("the ball B_r(x) must lie inside the cone (r < delta(x))")
    stream = as_stream(stream, ("mean_value",))
    w = x[None, :] + sample_ball_exit(params, r, np.zeros(x.size), stream, reps)
    vals = np.asarray(M_eval(w), dtype=float)
    m, se = mean_se(vals)
    return m - float(np.asarray(M_eval(x[None, :]), dtype=float)[0]), se


@dataclass
class MartinEstimate:
    """beta_hat and an angular profile of M on the unit sphere, M(e_d) = 1."""

    cone: ConeSpec
    params: StableParams
    beta_hat: float
    beta_ci: tuple
    angles: np.ndarray
    profile: np.ndarray
    profile_se: np.ndarray
    seed: int = 0
    anchor_scale: float = 16.0
    flags: list = field(default_factory=list)

    def profile_at(self, psi):
        """Linear interpolation of the profile, 0 at the boundary angle."""
        grid = np.append(self.angles, self.cone.theta)
        vals = np.append(self.profile, 0.0)
        return np.interp(psi, grid, vals)

    def __call__(self, x):
        """Evaluate M(x) = |x|^beta profile(angle(x)); 0 outside the cone."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        inside = contains(self.cone, x)
        out = np.zeros(x.shape[0])
        if np.any(inside):
            xi = x[inside]
            out[inside] = (np.linalg.norm(xi, axis=1) ** self.beta_hat
                           * self.profile_at(axis_angle(xi)))
        return out

    def to_dict(self):
        return {
            "cone": {"dim": self.cone.dim, "theta": self.cone.theta},
            "params": {"alpha": self.params.alpha, "dim": self.params.dim},
            "beta_hat": self.beta_hat,
            "ci": list(self.beta_ci),
            "profile": [{"psi": float(a), "value": float(v), "se": float(s),
                         "ci_lo": float(v - Z95 * s), "ci_hi": float(v + Z95 * s)}
                        for a, v, s in zip(self.angles, self.profile, self.profile_se)],
            "seeds": {"master": self.seed},
            "anchor_scale": self.anchor_scale,
            "normalization": "M(e_d)=1",
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        prof = doc["profile"]
        return cls(ConeSpec(doc["cone"]["dim"], doc["cone"]["theta"]),
                   StableParams(doc["params"]["alpha"], doc["params"]["dim"]),
                   doc["beta_hat"], tuple(doc["ci"]),
                   np.array([p["psi"] for p in prof]), np.array([p["value"] for p in prof]),
                   np.array([p["se"] for p in prof]), doc["seeds"]["master"],
                   doc.get("anchor_scale", 16.0), list(doc.get("flags", [])))


def halfspace_estimate(params: StableParams, n_angles: int = 32) -> MartinEstimate:
    """The exact half-space kernel in profile form: cos(psi)^{alpha/2}."""
    cone = ConeSpec(params.dim, math.pi / 2, params.alpha / 2)
    angles = cone.theta * np.arange(n_angles) / n_angles
    return MartinEstimate(cone, params, params.alpha / 2, (params.alpha / 2,) * 2, angles,
                          np.cos(angles) ** (params.alpha / 2), np.zeros(n_angles))


def estimate_martin_profile(cone: ConeSpec, params: StableParams, horizons, reps: int,
                            seed: int = 0, n_angles: int = 32, anchor_scale: float = 16.0,
                            extrapolate: bool = False, beta: BetaEstimate | None = None,
                            threads=None) -> MartinEstimate:
    """beta_hat plus M at unit vectors on a uniform grid of n_angles angles."""
    if cone.dim < 2:
        raise ValueError("an angular profile needs dim >= 2")
    if beta is None:
        beta = estimate_beta(cone, params, horizons, reps, seed, threads=threads, min_reps=1)
    angles = cone.theta * np.arange(n_angles) / n_angles
    pts = sample_interior_grid(cone, [1.0], angles)
    vals, ses, flags = [], [], list(beta.flags)
    for p in pts:
        est = estimate_martin_ratio(cone, params, p, horizons, reps, seed, anchor_scale,
                                    extrapolate, threads=threads)
        vals.append(max(est.value, 0.0))
        ses.append(est.se)
        flags.extend(est.flags)
    return MartinEstimate(cone, params, beta.beta_hat, beta.ci, angles, np.array(vals),
                          np.array(ses), seed, anchor_scale, flags)


def michalik_ratio(cone: ConeSpec, params: StableParams, beta: float, M_values, points):
    """M(x) / (|x|^{beta - alpha/2} delta(x)^{alpha/2}) at interior points."""
    points = np.atleast_2d(points)
    env = (np.linalg.norm(points, axis=1) ** (beta - params.alpha / 2)
           * dist_to_boundary(cone, points) ** (params.alpha / 2))
    return np.asarray(M_values, dtype=float) / env


def check_michalik_envelope(cone: ConeSpec, params: StableParams, estimate, grid):
    """min, max and max/min of M_hat over the two-sided envelope on ``grid``.

    ``estimate`` is a MartinEstimate (or any callable M with a ``beta_hat``).
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    ratio = michalik_ratio(cone, params, estimate.beta_hat, estimate(grid), grid)
    lo, hi = float(ratio.min()), float(ratio.max())
    ok = np.isfinite(lo) and np.isfinite(hi) and lo > 0
    return {"min": lo, "max": hi, "spread": hi / lo if lo > 0 else float("inf"),
            "finite_positive": bool(ok), "ratios": ratio}


# ----------------------------------------------------------------------------
# estimator front ends

class MartinKernelEstimator(BaseEstimator):
    """Fit beta and the angular profile of M by simulation; predict M(x).

    ``fit(X)`` takes the training points at which M(x)/M(e_d) is estimated
    directly (default: unit vectors on a uniform angle grid); the learned
    model is M(x) = |x|^beta_ * profile(angle(x)), with linear interpolation
    in the angle and 0 at the boundary.

    Parameters
    ----------
    theta, alpha, dim : cone aperture, stability index, dimension
    horizons : tuple (lo, hi)
        Geometric horizon grid with ratio 2.
    reps : int
        Paths per start point.
    anchor_scale : float
        Scale L of the survival-ratio starts.
    n_angles : int
        Size of the default angle grid.
    """

    def __init__(self, theta=math.pi / 2, alpha=1.5, dim=2, horizons=(2**6, 2**12),
                 reps=100_000, anchor_scale=16.0, extrapolate=False, n_angles=32, seed=0,
                 threads=None):
        self.theta = theta
        self.alpha = alpha
        self.dim = dim
        self.horizons = horizons
        self.reps = reps
        self.anchor_scale = anchor_scale
        self.extrapolate = extrapolate
        self.n_angles = n_angles
        self.seed = seed
        self.threads = threads

    def fit(self, X=None, y=None):
        cone = ConeSpec(self.dim, self.theta)
        params = StableParams(self.alpha, self.dim)
        hz = geometric_horizons(*self.horizons)
        if X is None:
            X = sample_interior_grid(cone, [1.0], cone.theta * np.arange(self.n_angles)
                                     / self.n_angles)
        X = check_array(X)
        if X.shape[1] != self.dim:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.dim}")
        if not np.all(contains(cone, X)):
            raise ValueError("all training points must lie inside the cone")
        beta = estimate_beta(cone, params, hz, self.reps, self.seed, threads=self.threads,
                             min_reps=1)
        vals, ses = [], []
        for x in X:
            est = estimate_martin_ratio(cone, params, x, hz, self.reps, self.seed,
                                        self.anchor_scale, self.extrapolate,
                                        threads=self.threads)
            vals.append(est.value)
            ses.append(est.se)
        norms = np.linalg.norm(X, axis=1)
        psi = axis_angle(X)
        order = np.argsort(psi, kind="stable")
        prof = np.maximum(np.array(vals), 0.0) / norms**beta.beta_hat
        self.cone_ = cone
        self.params_ = params
        self.beta_ = beta.beta_hat
        self.beta_ci_ = beta.ci
        self.train_values_ = np.array(vals)
        self.train_se_ = np.array(ses)
        self.estimate_ = MartinEstimate(cone, params, beta.beta_hat, beta.ci, psi[order],
                                        prof[order], (np.array(ses) / norms**beta.beta_hat)[order],
                                        self.seed, self.anchor_scale, list(beta.flags))
        return self

    def predict(self, X):
        check_is_fitted(self, "estimate_")
        X = check_array(X)
        if X.shape[1] != self.dim:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.dim}")
        return self.estimate_(X)


class ExitTailEstimator(BaseEstimator):
    """Power-law fit P(tau > n) ~ C n^{-beta/alpha} to observed exit times.

    ``fit(X)`` takes exit times (censored ones coded as any value above the
    largest horizon); ``predict(n)`` returns the fitted survival probability.
    """

    def __init__(self, alpha=1.5, horizons=(2**6, 2**14), drop_fraction=0.2):
        self.alpha = alpha
        self.horizons = horizons
        self.drop_fraction = drop_fraction

    def fit(self, X, y=None):
        tau = check_array(np.asarray(X).reshape(-1, 1), dtype=np.int64).ravel()
        surv = survival_from_tau(tau, geometric_horizons(*self.horizons))
        est = beta_from_survival(surv, self.alpha, self.drop_fraction)
        x = np.log(est.fit_horizons.astype(float))
        y_log = np.log(surv.estimates[np.isin(surv.horizons, est.fit_horizons)])
        self.beta_ = est.beta_hat
        self.beta_se_ = est.se
        self.slope_ = est.slope
        self.intercept_ = float(np.mean(y_log - est.slope * x))
        self.survival_ = surv
        return self

    def predict(self, X):
        check_is_fitted(self, "beta_")
        n = check_array(np.asarray(X, dtype=float).reshape(-1, 1)).ravel()
        return np.exp(self.intercept_ + self.slope_ * np.log(n))
