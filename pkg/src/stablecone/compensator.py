"""Green potential compensator in the half-space.

In the half-space {x_d > 0} the killed Green function is explicit, M(x) =
x_d^{alpha/2}, and the weight Lambda(y) = M(y)/(1 + delta(y))^{alpha+eps/2}
depends on y_d only.  Integrating the d-dimensional Green function over
the boundary directions gives the half-line Green function, so

    U(x) = int_K G(x, y) Lambda(y) dy = int_0^inf G_1(x_d, t) Lambda(t) dt

is a one-dimensional integral.  It is tabulated once per (alpha, eps) and
serves as the deterministic reference for the Monte Carlo estimators.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special
from scipy.interpolate import PchipInterpolator

from .cone import ConeSpec, dist_to_boundary
from .martin import eval_martin_halfspace
from .rng import Stream, as_stream
from .stable import (IncrementLaw, QuadratureError, StableParams, ball_volume, radial_density,
                     sample_isotropic_increment, sphere_area)
from .stats import mean_se
from .walk import WalkConfig, simulate_walks


# ----------------------------------------------------------------------------
# Green function

@dataclass(frozen=True)
class GreenHalfspace:
    """Killed Green function of the half-space for the isotropic stable process.

    G(x, y) = kappa |x-y|^{alpha-d} int_0^zeta s^{alpha/2-1} (1+s)^{-d/2} ds,
    zeta = 4 x_d y_d / |x-y|^2, kappa = Gamma(d/2) / (2^alpha pi^{d/2} Gamma(alpha/2)^2).

    For d > alpha this is A |x-y|^{alpha-d} I_{zeta/(1+zeta)}(alpha/2, (d-alpha)/2)
    with A = Gamma((d-alpha)/2) / (2^alpha pi^{d/2} Gamma(alpha/2)).  The
    half-line d = 1 < alpha is also accepted: the free process is then
    recurrent, but the killed Green function is finite and given by the
    hypergeometric form of the same integral.
    """

    params: StableParams

    @property
    def kappa(self) -> float:
        a, d = self.params.alpha, self.params.dim
        return math.gamma(d / 2) / (2**a * math.pi ** (d / 2) * math.gamma(a / 2) ** 2)

    @property
    def A(self) -> float:
        a, d = self.params.alpha, self.params.dim
        if d <= a:
            raise ValueError("A_{d,alpha} needs d > alpha")
        return math.gamma((d - a) / 2) / (2**a * math.pi ** (d / 2) * math.gamma(a / 2))

    def __call__(self, x, y):
        return green_halfspace(self, x, y)


def _green_from_geometry(params: StableParams, r2, prod):
    """G given |x-y|^2 and x_d y_d (arrays)."""
    a, d = params.alpha, params.dim
    zeta = 4.0 * prod / r2
    rpow = r2 ** ((a - d) / 2)
    if d > a:
        A = (math.gamma((d - a) / 2) / (2**a * math.pi ** (d / 2) * math.gamma(a / 2)))
        return A * rpow * special.betainc(a / 2, (d - a) / 2, zeta / (1.0 + zeta))
    kappa = math.gamma(d / 2) / (2**a * math.pi ** (d / 2) * math.gamma(a / 2) ** 2)
    return (kappa * rpow * zeta ** (a / 2) / (a / 2)
            * special.hyp2f1(d / 2, a / 2, a / 2 + 1, -zeta))


def green_halfspace(g: GreenHalfspace, x, y):
    """G(x, y) for interior x != y (broadcasting over leading axes)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x[..., -1] <= 0) or np.any(y[..., -1] <= 0):
        raise ValueError("both points must lie strictly inside the half-space")
    r2 = np.sum((x - y) ** 2, axis=-1)
    if np.any(r2 == 0):
        raise ValueError("G has a pole at x = y")
    out = _green_from_geometry(g.params, r2, x[..., -1] * y[..., -1])
    return float(out) if np.ndim(out) == 0 else out


def green_envelope(params: StableParams, x, y, beta: float | None = None):
    """The two-sided envelope for G in a circular cone, evaluated in the half-space.

    min(A / |x-y|^{d-alpha},
        delta(x)^{alpha/2} delta(y)^{alpha/2} / |x-y|^d * (min|.|/max|.|)^{beta-alpha/2})
    """
    a, d = params.alpha, params.dim
    beta = a / 2 if beta is None else beta
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = GreenHalfspace(params).A
    r = np.linalg.norm(x - y, axis=-1)
    nx, ny = np.linalg.norm(x, axis=-1), np.linalg.norm(y, axis=-1)
    far = ((x[..., -1] * y[..., -1]) ** (a / 2) / r**d
           * (np.minimum(nx, ny) / np.maximum(nx, ny)) ** (beta - a / 2))
    return np.minimum(A * r ** (a - d), far)


def random_halfspace_pairs(dim: int, n: int, stream=None, r_range=(1e-2, 1e2)):
    """n pairs of half-space points, log-uniform in |x| and uniform in direction."""
    gen = as_stream(stream, ("green_pairs",)).generator()

    def draw():
        u = gen.normal(size=(n, dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        u[:, -1] = np.abs(u[:, -1])
        rad = np.exp(gen.uniform(math.log(r_range[0]), math.log(r_range[1]), size=(n, 1)))
        return u * rad

    x, y = draw(), draw()
    return x, y


def envelope_check(params: StableParams, n_pairs: int = 1000, stream=None):
    """Ratios G / envelope over random pairs; returns the ratios and the factor C.

    C = max(max ratio, 1 / min ratio), so the ratios lie in [1/C, C].
    """
    x, y = random_halfspace_pairs(params.dim, n_pairs, stream)
    ratio = green_halfspace(GreenHalfspace(params), x, y) / green_envelope(params, x, y)
    factor = float(max(ratio.max(), 1.0 / ratio.min()))
    return {"ratios": ratio, "min": float(ratio.min()), "max": float(ratio.max()),
            "factor": factor}


# ----------------------------------------------------------------------------
# configuration and the weight Lambda

def default_epsilon(alpha: float) -> float:
    return 0.5 if alpha > 1 else 0.3


@dataclass(frozen=True)
class CompensatorConfig:
    """Half-space compensator settings.

    epsilon is the exponent gain in the weight Lambda; R the shift along the
    axis e_d; c the supermartingale constant.
    """

    params: StableParams
    epsilon: float | None = None
    R: float = 8.0
    c: float = 0.0
    mc_samples: int = 20_000
    pilot_samples: int = 1_000

    def __post_init__(self):
        eps = default_epsilon(self.params.alpha) if self.epsilon is None else float(self.epsilon)
        if not 0.0 < eps <= self.params.alpha:
            raise ValueError(f"epsilon must lie in (0, alpha], got {eps}")
        if self.c < 0 or self.R < 0:
            raise ValueError("c and R must be non-negative")
        object.__setattr__(self, "epsilon", eps)

    @property
    def alpha(self):
        return self.params.alpha

    @property
    def cone(self) -> ConeSpec:
        return ConeSpec(self.params.dim, math.pi / 2)

    @property
    def lambda_power(self) -> float:
        return self.params.alpha + self.epsilon / 2


def _lambda_1d(alpha, eps, t):
    t = np.asarray(t, dtype=float)
    tp = np.maximum(t, 0.0)
    return np.where(t > 0, tp ** (alpha / 2) / (1.0 + tp) ** (alpha + eps / 2), 0.0)


def lambda_weight(cfg: CompensatorConfig, y):
    """Lambda(y) = M(y) / (1 + delta(y))^{alpha + eps/2}; 0 off the half-space."""
    y = np.asarray(y, dtype=float)
    out = _lambda_1d(cfg.alpha, cfg.epsilon, y[..., -1])
    return float(out) if out.ndim == 0 else out


# ----------------------------------------------------------------------------
# U_Lambda by one-dimensional quadrature

def _green_1d(alpha, s, t):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    return _green_from_geometry(StableParams(alpha, 1), (s - t) ** 2, s * t)


def u_lambda_quad(cfg: CompensatorConfig, x, rtol: float = 1e-10) -> float:
    """U(x) = int_0^inf G_1(x_d, t) Lambda(t) dt by adaptive quadrature."""
    s = float(np.asarray(x, dtype=float).reshape(-1)[-1])
    if s <= 0:
        return 0.0
    a, eps = cfg.alpha, cfg.epsilon

    def f(t):
        return float(_green_1d(a, s, t) * _lambda_1d(a, eps, t))

    def tail(v):
        # t = 2 s e^v turns the t^{-1-eps/2} tail into an exponential one
        t = 2 * s * math.exp(v)
        return f(t) * t

    v_max = 60.0
    total, err = 0.0, 0.0
    with warnings.catch_warnings():
        # QUADPACK reports roundoff near the |s-t|^{alpha-1} spike when alpha < 1;
        # its error estimate is checked below instead
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        for g, lo, hi in ((f, 0.0, s), (f, s, 2 * s), (tail, 0.0, v_max)):
            val, e = integrate.quad(g, lo, hi, epsabs=0.0, epsrel=rtol, limit=500)
            total += val
            err += e
    if err > 1e-6 * abs(total):
        raise QuadratureError(f"U_Lambda quadrature at x_d={s}: {total:.6e} +- {err:.2e}",
                              total, err)
    # beyond t_max the integrand is kappa_1 (4s)^{a/2} / (a/2) t^{-1-eps/2} up to O(s/t)
    t_max = 2 * s * math.exp(v_max)
    kappa1 = math.gamma(0.5) / (2**a * math.sqrt(math.pi) * math.gamma(a / 2) ** 2)
    total += kappa1 * (4 * s) ** (a / 2) / (a / 2) * t_max ** (-eps / 2) * 2 / eps
    return total


class UTable:
    """U_Lambda on the half-space as a function of x_d (log-log PCHIP).

    Nodes cover [1e-4, 1e6]; outside, power laws are continued with the
    local end slopes (U ~ t^{alpha/2} near 0 and ~ t^{(alpha-eps)/2} far out).
    """

    def __init__(self, cfg: CompensatorConfig, lo: float = 1e-4, hi: float = 1e6,
                 n: int = 301):
        self.cfg = cfg
        t = np.geomspace(lo, hi, n)
        u = np.array([u_lambda_quad(cfg, [ti]) for ti in t])
        self._lt = np.log(t)
        self._lu = np.log(u)
        self._spline = PchipInterpolator(self._lt, self._lu, extrapolate=False)
        self._slope_lo = (self._lu[1] - self._lu[0]) / (self._lt[1] - self._lt[0])
        self._slope_hi = (self._lu[-1] - self._lu[-2]) / (self._lt[-1] - self._lt[-2])

    def __call__(self, xd):
        xd = np.asarray(xd, dtype=float)
        out = np.zeros(xd.shape)
        pos = xd > 0
        lt = np.log(xd[pos])
        lu = self._spline(lt)
        below = lt < self._lt[0]
        above = lt > self._lt[-1]
        lu[below] = self._lu[0] + self._slope_lo * (lt[below] - self._lt[0])
        lu[above] = self._lu[-1] + self._slope_hi * (lt[above] - self._lt[-1])
        out[pos] = np.exp(lu)
        return out

    def W(self, y):
        """W = M + U_Lambda at points y (0 off the half-space)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return eval_martin_halfspace(self.cfg.params, y) + self(y[:, -1])


@lru_cache(maxsize=8)
def _cached_table(alpha, eps):
    return UTable(CompensatorConfig(StableParams(alpha, 1), eps))


def u_table(cfg: CompensatorConfig) -> UTable:
    """Shared table; U depends on (alpha, eps) only, not on the dimension."""
    tab = _cached_table(cfg.alpha, cfg.epsilon)
    view = object.__new__(UTable)
    view.__dict__.update(tab.__dict__)
    view.cfg = cfg
    return view


# ----------------------------------------------------------------------------
# U_Lambda by importance sampling

@dataclass
class MCResult:
    value: float
    se: float
    flags: list = field(default_factory=list)
    detail: dict = field(default_factory=dict)


def _directions(gen: np.random.Generator, n: int, d: int):
    if d == 1:
        return np.where(gen.random((n, 1)) < 0.5, -1.0, 1.0)
    g = gen.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _stratum_terms(cfg, g, x, which, u, dirs):
    """Integrand over proposal density for one stratum.

    ``near``: |y-x| = delta U^{1/alpha} on (0, delta), density prop. to
    rho^{alpha-1}.  ``far``: Pareto |y-x| = delta U^{-1/gamma} on
    (delta, inf), gamma = eps/2, matching the rho^{-1-eps/2} decay of the
    integrand.  Directions are uniform.
    """
    a, d = cfg.alpha, cfg.params.dim
    delta = x[-1]
    gamma = cfg.epsilon / 2
    if which == "near":
        rho = delta * u ** (1.0 / a)
        q_rad = a * rho ** (a - 1) / delta**a
    else:
        rho = delta * u ** (-1.0 / gamma)
        q_rad = gamma * delta**gamma * rho ** (-1.0 - gamma)
    y = x[None, :] + rho[:, None] * dirs
    q = q_rad / (sphere_area(d) * rho ** (d - 1)) if d > 1 else q_rad / 2.0
    vals = np.zeros(rho.size)
    ok = y[:, -1] > 0
    if np.any(ok):
        r2 = rho[ok] ** 2
        vals[ok] = (_green_from_geometry(g.params, r2, x[-1] * y[ok, -1])
                    * _lambda_1d(a, cfg.epsilon, y[ok, -1]) / q[ok])
    return vals


def u_lambda_mc(cfg: CompensatorConfig, g: GreenHalfspace, x, stream=None,
                n: int | None = None, tol: float | None = None) -> MCResult:
    """Importance-sampling estimate of U_Lambda(x) with its standard error.

    The near-pole and heavy-tail proposals have disjoint radial supports, so
    they act as strata.  A pilot run with a 50/50 split sets the allocation
    proportional to each stratum's root second moment.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x[-1] <= 0:
        raise ValueError("x must lie inside the half-space")
    stream = as_stream(stream, ("u_lambda",))
    gen = stream.generator()
    n = cfg.mc_samples if n is None else int(n)
    d = cfg.params.dim
    half = max(cfg.pilot_samples // 2, 2)
    m2 = {}
    for which in ("near", "far"):
        v = _stratum_terms(cfg, g, x, which, gen.random(half), _directions(gen, half, d))
        m2[which] = float(np.sqrt(np.mean(v**2)))
    tot = m2["near"] + m2["far"]
    w_near = 0.5 if tot == 0 else min(max(m2["near"] / tot, 0.05), 0.95)
    counts = {"near": max(int(round(w_near * n)), 2)}
    counts["far"] = max(n - counts["near"], 2)
    value, var = 0.0, 0.0
    for which, k in counts.items():
        v = _stratum_terms(cfg, g, x, which, gen.random(k), _directions(gen, k, d))
        value += v.mean()
        var += v.var(ddof=1) / k
    se = math.sqrt(var)
    flags = []
    if tol is not None and se > tol:
        flags.append(f"standard error {se:.3g} above tolerance {tol:.3g}")
    return MCResult(value, se, flags, {"weight_near": w_near, "counts": counts})


# ----------------------------------------------------------------------------
# the error function f and the drift of W

def _series_tail_1d(alpha, s, terms=16):
    """Large-s series of the one-dimensional stable density.

    Asymptotic for alpha > 1, convergent for alpha < 1.
    """
    out = np.zeros_like(s)
    for k in range(1, terms + 1):
        out += ((-1) ** (k + 1) * math.exp(math.lgamma(alpha * k + 1) - math.lgamma(k + 1))
                * math.sin(math.pi * alpha * k / 2) * s ** (-alpha * k - 1))
    return out / math.pi


class StableMarginal:
    """Density of one coordinate of Z (the 1-d stable law).

    Fourier quadrature on [0, s_switch], tabulated; the series beyond, where
    it is accurate to about 1e-11 relative.
    """

    def __init__(self, alpha: float, n: int = 801):
        self.alpha = alpha
        self.s_switch, self.terms = (20.0, 16) if alpha > 1 else (3.0, 40)
        p = StableParams(alpha, 1)
        s = np.concatenate([[0.0], np.geomspace(1e-3, self.s_switch, n)])
        vals = np.array([radial_density(p, si, rtol=1e-9) for si in s])
        self._pchip = PchipInterpolator(s, vals)

    def __call__(self, s):
        s = np.abs(np.asarray(s, dtype=float))
        out = np.empty_like(s)
        inner = s <= self.s_switch
        out[inner] = self._pchip(s[inner])
        out[~inner] = _series_tail_1d(self.alpha, s[~inner], self.terms)
        return out


@lru_cache(maxsize=8)
def stable_marginal(alpha: float) -> StableMarginal:
    return StableMarginal(alpha)


def _uniform_ball_coordinate(d, r):
    """Density of one coordinate of a uniform point in B(0, r) in R^d."""
    if d == 1:
        return lambda u: np.where(np.abs(u) < r, 0.5 / r, 0.0)
    c = ball_volume(d - 1) / ball_volume(d)

    def dens(u):
        u = np.asarray(u, dtype=float)
        return np.where(np.abs(u) < r, c * np.maximum(r * r - u * u, 0.0) ** ((d - 1) / 2)
                        / r**d, 0.0)
    return dens


def _expect_1d(h, dens, lo, hi, points=()):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(lambda s: float(h(s) * dens(s)), lo, hi,
                                  points=points or None, epsabs=0.0, epsrel=1e-10, limit=500)
    if err > 1e-10 + 1e-7 * abs(val):
        raise QuadratureError(f"expectation quadrature on [{lo}, {hi}]: {val:.6e} +- {err:.2e}",
                              val, err)
    return val


def expected_after_step(law: IncrementLaw, h, yd: float) -> float:
    """E[h(y_d + X_d)] for a function h of the last coordinate (0 below 0)."""
    a = law.alpha
    marg = stable_marginal(a)

    def hz(s):
        return h(yd + s)

    brk = [-yd, -yd / 2, 0.0, yd]
    val = 0.0
    edges = [-yd, -yd / 2, 0.0, yd, 4 * yd + 10.0, np.inf]
    # the marginal switches from table to series at s_switch: split there too
    edges = sorted(set(edges) | {v for v in (-marg.s_switch, marg.s_switch) if v > -yd})
    for lo, hi in zip(edges[:-1], edges[1:]):
        val += _expect_1d(hz, marg, lo, hi)
    if law.variant == "perturbed":
        d = law.dim
        r1, r2, r3 = law.r1, law.r2, law.r3
        phi1 = _uniform_ball_coordinate(d, r1)
        v3, v2 = ball_volume(d, r3), ball_volume(d, r2)
        b3, b2 = _uniform_ball_coordinate(d, r3), _uniform_ball_coordinate(d, r2)

        def phi2(u):
            return (v3 * b3(u) - v2 * b2(u)) / (v3 - v2)

        e1 = _expect_1d(hz, phi1, -r1, r1, points=[v for v in brk if -r1 < v < r1])
        e2 = _expect_1d(hz, phi2, -r3, r3, points=[v for v in (-r2, r2) + tuple(brk)
                                                    if -r3 < v < r3])
        val += law.eps_pert * (e1 - e2)
    return val


def error_function_quad(law: IncrementLaw, y) -> float:
    """f(y) = E[M(y+X)] - M(y) by quadrature over the law of X_d."""
    yd = float(np.asarray(y, dtype=float).reshape(-1)[-1])
    a = law.alpha

    def m(t):
        return max(t, 0.0) ** (a / 2)

    return expected_after_step(law, m, yd) - m(yd)


def drift_quad(cfg: CompensatorConfig, law: IncrementLaw, y, table: UTable | None = None):
    """E[W(y+X)] - W(y) by quadrature, with W = M + U_Lambda."""
    table = u_table(cfg) if table is None else table
    yd = float(np.asarray(y, dtype=float).reshape(-1)[-1])
    a = law.alpha

    def w(t):
        return max(t, 0.0) ** (a / 2) + float(table(np.array([t]))[0])

    return expected_after_step(law, w, yd) - w(yd)


def error_function_mc(law: IncrementLaw, y, n: int, stream=None) -> MCResult:
    """Antithetic Monte Carlo estimate of f(y) = E[M(y+X)] - M(y)."""
    y = np.asarray(y, dtype=float).reshape(-1)
    stream = as_stream(stream, ("error_function",))
    X = sample_isotropic_increment(law, stream, n)
    M = lambda p: eval_martin_halfspace(law.params, p)
    h = 0.5 * (M(y + X) + M(y - X)) - M(y[None, :])[0]
    m, se = mean_se(h)
    return MCResult(m, se)


@dataclass
class DriftResult:
    x: np.ndarray
    y: np.ndarray
    delta: float
    drift: float
    se: float
    lam: float
    c: float = 0.0
    flags: list = field(default_factory=list)
    raw_drift: float = float("nan")
    raw_se: float = float("nan")

    @property
    def verdict(self) -> bool:
        """drift + c Lambda < 0 beyond 2 standard errors."""
        return self.drift + self.c * self.lam < -2.0 * self.se

    HEADER_TAIL = ("delta", "drift", "se", "lambda", "verdict")


def error_drift_check(cfg: CompensatorConfig, law: IncrementLaw, x, stream=None,
                      n_outer: int = 100_000, inner: str = "mc", n_inner: int = 64,
                      table: UTable | None = None, m_control: bool = True) -> DriftResult:
    """Monte Carlo drift of W = M + U_Lambda at y = x + R e_d.

    Outer draws X come in antithetic pairs (X, -X).  With ``inner="mc"`` the
    values U_Lambda(y +- X) and U_Lambda(y) are importance-sampling estimates
    that share one child stream per outer draw, so their difference is
    unbiased and has little inner noise.  ``inner="table"`` uses the
    quadrature table instead.

    M(y+X) grows like |X|^{alpha/2}, so the M part of the outer average has
    infinite variance.  With ``m_control`` it is used as a control variate
    with known mean f(y) (by quadrature); the uncontrolled estimate is kept
    in ``raw_drift``/``raw_se``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = x.copy()
    y[-1] += cfg.R
    cone = cfg.cone
    delta = float(dist_to_boundary(cone, y))
    if delta <= cfg.R:
        raise ValueError("need delta(x + R e_d) > R")
    stream = as_stream(stream, ("drift",))
    X = sample_isotropic_increment(law, stream.spawn("outer"), n_outer)
    M = lambda p: eval_martin_halfspace(cfg.params, p)
    m_part = 0.5 * (M(y + X) + M(y - X)) - M(y[None, :])[0]
    flags = []
    if inner == "table":
        table = u_table(cfg) if table is None else table
        u_part = 0.5 * (table(y[-1] + X[:, -1]) + table(y[-1] - X[:, -1])) - table(y[-1:])[0]
    elif inner == "mc":
        u_part = _u_difference_mc(cfg, y, X, stream.spawn("inner"), n_inner)
    else:
        raise ValueError(f"unknown inner mode {inner!r}")
    raw, raw_se = mean_se(m_part + u_part)
    if m_control:
        du, se = mean_se(u_part)
        drift = error_function_quad(law, y) + du
    else:
        drift, se = raw, raw_se
    if not np.isfinite(se) or se > abs(drift):
        flags.append("nested standard error exceeds the drift magnitude")
    return DriftResult(x, y, delta, drift, se, lambda_weight(cfg, y), cfg.c, flags,
                       raw, raw_se)


def _u_difference_mc(cfg, y, X, stream: Stream, n_inner: int, block: int = 4096):
    """(U(y+X) + U(y-X))/2 - U(y) with common inner samples per outer draw."""
    g = GreenHalfspace(cfg.params)
    d = cfg.params.dim
    pilot = u_lambda_mc(cfg, g, y, stream.spawn("pilot"), n=cfg.pilot_samples)
    w_near = pilot.detail["weight_near"]
    k_near = max(int(round(w_near * n_inner)), 1)
    k_far = max(n_inner - k_near, 1)
    out = np.empty(X.shape[0])
    gen = stream.generator()
    for i0 in range(0, X.shape[0], block):
        xb = X[i0:i0 + block]
        m = xb.shape[0]
        parts = []
        for which, k in (("near", k_near), ("far", k_far)):
            u = gen.random(m * k)
            dirs = _directions(gen, m * k, d)
            base = np.repeat(y[None, :], m * k, axis=0)
            shift = np.repeat(xb, k, axis=0)
            vals = []
            for pts in (base + shift, base - shift, base):
                vals.append(_stratum_terms_points(cfg, g, pts, which, u, dirs).reshape(m, k))
            parts.append((vals, k))
        acc = np.zeros(m)
        for vals, k in parts:
            acc += (0.5 * (vals[0] + vals[1]) - vals[2]).mean(axis=1)
        out[i0:i0 + m] = acc
    return out


def _stratum_terms_points(cfg, g, pts, which, u, dirs):
    """_stratum_terms for a different centre per sample; 0 for centres outside."""
    a, d = cfg.alpha, cfg.params.dim
    delta = pts[:, -1]
    live = delta > 0
    vals = np.zeros(u.size)
    if not np.any(live):
        return vals
    dl, ul, pl, dirl = delta[live], u[live], pts[live], dirs[live]
    gamma = cfg.epsilon / 2
    if which == "near":
        rho = dl * ul ** (1.0 / a)
        q_rad = a * rho ** (a - 1) / dl**a
    else:
        rho = dl * ul ** (-1.0 / gamma)
        q_rad = gamma * dl**gamma * rho ** (-1.0 - gamma)
    yy = pl + rho[:, None] * dirl
    q = q_rad / (sphere_area(d) * rho ** (d - 1)) if d > 1 else q_rad / 2.0
    ok = yy[:, -1] > 0
    sub = np.zeros(rho.size)
    if np.any(ok):
        sub[ok] = (_green_from_geometry(g.params, rho[ok] ** 2, pl[ok, -1] * yy[ok, -1])
                   * _lambda_1d(a, cfg.epsilon, yy[ok, -1]) / q[ok])
    vals[live] = sub
    return vals


def drift_table_rows(results):
    """CSV rows (x coords..., delta, drift, se, lambda, verdict)."""
    for r in results:
        yield tuple(float(v) for v in r.x) + (r.delta, r.drift, r.se, r.lam,
                                              "pass" if r.verdict else "fail")


# ----------------------------------------------------------------------------
# the supermartingale Y_n

def supermartingale_trace(cfg: CompensatorConfig, law: IncrementLaw, x, n_steps: int,
                          reps: int, seed: int = 0, min_count: int = 200, threads=None,
                          audit_paths: int = 10):
    """Cell-wise conditional increments of Y_n = W(S_n) 1{tau > n} + c sum Lambda(S_k) 1{tau > k}.

    Walks start at x + R e_d.  Pre-step states are binned by
    (floor log2 delta, floor log2 |x|); each cell reports the mean increment,
    its SE, and whether it exceeds +2 SE.  Cells with fewer than
    ``min_count`` visits are reported as undersampled.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    start = x.copy()
    start[-1] += cfg.R
    table = u_table(cfg)
    wcfg = WalkConfig(cfg.cone, law, start, n_steps, reps, seed, "supermartingale")
    batch = simulate_walks(wcfg, checkpoints=range(n_steps + 1), threads=threads)
    pos = batch.cp_pos
    W = np.zeros(pos.shape[:2])
    lam = np.zeros(pos.shape[:2])
    for k in range(n_steps + 1):
        live = ~np.isnan(pos[:, k, 0])
        if np.any(live):
            W[live, k] = table.W(pos[live, k])
            lam[live, k] = lambda_weight(cfg, pos[live, k])
    # Y_n: killed paths keep only the accumulated Lambda sum
    Y = W + cfg.c * np.concatenate([np.zeros((reps, 1)), np.cumsum(lam, axis=1)[:, :-1]], axis=1)
    inc = np.diff(Y, axis=1)
    prev = pos[:, :-1, :]
    alive_prev = ~np.isnan(prev[:, :, 0])
    deltas = np.where(alive_prev, prev[:, :, -1], np.nan)
    norms = np.linalg.norm(np.where(alive_prev[..., None], prev, 0.0), axis=2)
    keys_d = np.floor(np.log2(deltas[alive_prev]))
    keys_r = np.floor(np.log2(norms[alive_prev]))
    vals = inc[alive_prev]
    cells = []
    for kd, kr in sorted(set(zip(keys_d.tolist(), keys_r.tolist()))):
        sel = (keys_d == kd) & (keys_r == kr)
        cnt = int(sel.sum())
        m, se = mean_se(vals[sel])
        deep = 2.0**kd > cfg.R
        cells.append({"log2_delta": int(kd), "log2_norm": int(kr), "count": cnt, "mean": m,
                      "se": se, "deep": bool(deep), "undersampled": cnt < min_count,
                      "exceeds": bool(cnt >= min_count and m > 2.0 * se)})
    killed = np.flatnonzero(batch.tau <= n_steps)[:audit_paths]
    audit = []
    for i in killed:
        t = int(batch.tau[i])
        audit.append({"path": int(i), "tau": t, "Y_final": float(Y[i, -1]),
                      "c_lambda_sum": float(cfg.c * lam[i, :t].sum())})
    return {"cells": cells, "audit": audit, "start": start}
