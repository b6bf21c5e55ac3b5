"""Isotropic alpha-stable increments, their density, and exact ball-exit laws.

Normalization: E exp(i xi.Z) = exp(-|xi|**alpha).  Every constant estimated
elsewhere in the package (kappa in particular) is relative to this scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, special

from . import _kernels
from .rng import Stream, as_stream


class QuadratureError(RuntimeError):
    """Adaptive quadrature stopped before reaching its tolerance."""

    def __init__(self, message, value, error):
        super().__init__(message)
        self.value = value
        self.error = error


class RejectionCapError(RuntimeError):
    """A rejection loop hit its iteration cap."""

    def __init__(self, message, acceptance_rate):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate


@dataclass(frozen=True)
class StableParams:
    """Stability index and dimension of the driving noise."""

    alpha: float
    dim: int

    def __post_init__(self):
        alpha = float(self.alpha)
        if not 0.0 < alpha < 2.0:
            raise ValueError(f"alpha must lie in (0, 2), got {alpha}")
        if alpha == 1.0:
            raise ValueError("alpha = 1 is excluded (alpha must differ from 1)")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "dim", int(self.dim))


def sphere_area(dim: int) -> float:
    """Surface area of the unit sphere S^{dim-1}."""
    return 2.0 * math.pi ** (dim / 2) / math.gamma(dim / 2)


def ball_volume(dim: int, r: float = 1.0) -> float:
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * r**dim


def levy_tail_constant(params: StableParams) -> float:
    """lim_{r->inf} r**(d+alpha) p_Z(r) (the Levy-measure density constant)."""
    a, d = params.alpha, params.dim
    return (a * 2.0 ** (a - 1) * math.sin(math.pi * a / 2) * math.gamma((d + a) / 2)
            * math.gamma(a / 2) / math.pi ** (d / 2 + 1))


# ----------------------------------------------------------------------------
# radial density by Hankel inversion on oscillation windows

_XGK = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.0])
_WGK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714])
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327])
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_WK = np.concatenate([_WGK[:-1], _WGK[::-1]])
_WG15 = np.zeros(15)
_WG15[[1, 3, 5]] = _WG[:3]
_WG15[[9, 11, 13]] = _WG[2::-1]
_WG15[7] = _WG[3]
_EPS = np.finfo(float).eps


def _gk15(f, a, b):
    """Vectorized Gauss-Kronrod (7, 15) over intervals [a_i, b_i].

    Returns the Kronrod estimates and QUADPACK-style error estimates.
    """
    centre = 0.5 * (a + b)
    half = 0.5 * (b - a)
    x = centre[:, None] + half[:, None] * _NODES[None, :]
    fx = f(x)
    resk = fx @ _WK
    resg = fx @ _WG15
    resabs = np.abs(fx) @ _WK
    resasc = np.abs(fx - 0.5 * resk[:, None]) @ _WK
    err = np.abs(resk - resg) * half
    resasc = resasc * half
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = resasc * np.minimum(1.0, (200.0 * err / resasc) ** 1.5)
    err = np.where((resasc != 0) & (err != 0), scaled, err)
    err = np.maximum(err, 50.0 * _EPS * resabs * half)
    return resk * half, err


def adaptive_windows(f, edges, rtol, atol=0.0, max_intervals=400_000):
    """Integrate ``f`` over consecutive windows with global adaptive bisection.

    Returns ``(value, error_estimate, converged)``.
    """
    a = np.asarray(edges[:-1], dtype=float)
    b = np.asarray(edges[1:], dtype=float)
    vals, errs = _gk15(f, a, b)
    while True:
        total = vals.sum()
        total_err = errs.sum()
        tol = max(rtol * abs(total), atol)
        if total_err <= tol:
            return total, total_err, True
        if a.size > max_intervals:
            return total, total_err, False
        # bisect every window whose error exceeds its share of the budget
        bad = errs > tol / a.size
        if not bad.any():
            bad = errs >= errs.max()
        mid = 0.5 * (a[bad] + b[bad])
        if np.any((mid <= a[bad]) | (mid >= b[bad])):
            return total, total_err, False
        na = np.concatenate([a[bad], mid])
        nb = np.concatenate([mid, b[bad]])
        nv, ne = _gk15(f, na, nb)
        keep = ~bad
        a = np.concatenate([a[keep], na])
        b = np.concatenate([b[keep], nb])
        vals = np.concatenate([vals[keep], nv])
        errs = np.concatenate([errs[keep], ne])


def _density_at_zero(alpha, d):
    return sphere_area(d) * math.gamma(d / alpha) / alpha / (2.0 * math.pi) ** d


def radial_density(params: StableParams, r, rtol: float = 1e-6, return_error: bool = False):
    """Density p_Z(y) at |y| = r by radial Fourier (Hankel) inversion.

    p_Z(y) = (2 pi)^{-d} int_0^inf exp(-s^alpha) s^{d-1} g(r s) dS_{d-1} ds with
    g(z) = Gamma(d/2) (2/z)^nu J_nu(z), nu = d/2 - 1.  The s-axis is cut into
    windows of half an oscillation period and integrated by adaptive
    Gauss-Kronrod.

    Parameters
    ----------
    params : StableParams
    r : float
        Radius, r >= 0.
    rtol : float
        Relative error target.
    return_error : bool
        Also return the quadrature error estimate.

    Raises
    ------
    QuadratureError
        If the error target is not met; the exception carries the value and
        the achieved error estimate.
    """
    r = float(r)
    if r < 0:
        raise ValueError("r must be non-negative")
    alpha, d = params.alpha, params.dim
    if r == 0.0:
        val = _density_at_zero(alpha, d)
        return (val, 0.0) if return_error else val
    nu = d / 2.0 - 1.0
    s_max = 70.0 ** (1.0 / alpha)
    width = min(math.pi / r, s_max / 64.0)
    edges = np.linspace(0.0, s_max, int(math.ceil(s_max / width)) + 1)
    prefactor = (2.0 * math.pi) ** (-d / 2.0) * r ** (-nu)

    def integrand(s):
        return np.exp(-s**alpha) * s ** (d / 2.0) * special.jv(nu, r * s)

    total, err, ok = adaptive_windows(integrand, edges, rtol)
    val, err = prefactor * total, prefactor * err
    if not ok:
        raise QuadratureError(
            f"radial_density did not converge at r={r}: estimate {val:.6e} +- {err:.2e}",
            val, err)
    return (val, err) if return_error else val


# ----------------------------------------------------------------------------
# increment laws

@dataclass(frozen=True)
class IncrementLaw:
    """Law of the walk increment X.

    ``variant="exact"`` is Z itself.  ``variant="perturbed"`` has density
    p_Z + eps_pert (phi1 - phi2) with phi1 uniform on B(0, r1) and phi2
    uniform on the shell {r2 < |y| < r3}; both are radial so the mean stays 0,
    and the difference to p_Z has compact support.
    """

    params: StableParams
    variant: str = "exact"
    eps_pert: float | None = None
    r1: float = 1.0
    r2: float = 1.0
    r3: float = 2.0
    _table_size: int = field(default=4097, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in ("exact", "perturbed"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "perturbed":
            if not (0 < self.r1 and 0 <= self.r2 < self.r3):
                raise ValueError("need r1 > 0 and 0 <= r2 < r3")
            threshold = self.positivity_threshold
            if self.eps_pert is None:
                object.__setattr__(self, "eps_pert", 0.5 * threshold)
            eps = float(self.eps_pert)
            if not (0.0 < eps < min(1.0, threshold)):
                raise ValueError(
                    f"eps_pert={eps} must lie in (0, {min(1.0, threshold):.6g}) "
                    "to keep the perturbed density non-negative")
            object.__setattr__(self, "eps_pert", eps)

    @classmethod
    def exact(cls, params: StableParams) -> "IncrementLaw":
        return cls(params)

    @classmethod
    def perturbed(cls, params: StableParams, eps_pert=None, r1=1.0, r2=1.0, r3=2.0):
        return cls(params, "perturbed", eps_pert, r1, r2, r3)

    @property
    def alpha(self):
        return self.params.alpha

    @property
    def dim(self):
        return self.params.dim

    @property
    def phi1_value(self) -> float:
        return 1.0 / ball_volume(self.dim, self.r1)

    @property
    def phi2_value(self) -> float:
        return 1.0 / (ball_volume(self.dim, self.r3) - ball_volume(self.dim, self.r2))

    @cached_property
    def shell_table(self) -> np.ndarray:
        """p_Z on a uniform grid over [r2, r3] (spline through 257 quadrature nodes)."""
        from scipy.interpolate import CubicSpline
        nodes = np.linspace(self.r2, self.r3, 257)
        vals = np.array([radial_density(self.params, r, rtol=1e-9) for r in nodes])
        fine = np.linspace(self.r2, self.r3, self._table_size)
        return CubicSpline(nodes, vals)(fine)

    @cached_property
    def positivity_threshold(self) -> float:
        """Largest eps_pert keeping p_Z - eps phi2 >= 0 on the shell."""
        return float(self.shell_table.min()) / self.phi2_value

    def kernel_args(self):
        """(law_code, lawp, tab) for the compiled kernels."""
        if self.variant == "exact":
            lawp = np.array([self.alpha, 0.0, 1.0, 1.0, 2.0, 0.0])
            return _kernels.EXACT, lawp, np.zeros(2)
        lawp = np.array([self.alpha, self.eps_pert, self.r1, self.r2, self.r3, self.phi2_value])
        return _kernels.PERTURBED, lawp, self.shell_table

    def density(self, y) -> np.ndarray:
        """Density p_X at points y (shape (..., d))."""
        y = np.asarray(y, dtype=float)
        rad = np.linalg.norm(y, axis=-1)
        base = np.vectorize(lambda r: radial_density(self.params, r))(rad)
        if self.variant == "exact":
            return base
        return base + self.eps_pert * (self._phi1(rad) - self._phi2(rad))

    def _phi1(self, rad):
        return np.where(rad < self.r1, self.phi1_value, 0.0)

    def _phi2(self, rad):
        return np.where((rad > self.r2) & (rad < self.r3), self.phi2_value, 0.0)


def sample_positive_stable(alpha_half: float, stream, size: int = 1) -> np.ndarray:
    """Positive stable variables A with E exp(-lam A) = exp(-lam**alpha_half)."""
    if not 0.0 < alpha_half < 1.0:
        raise ValueError(f"alpha_half must lie in (0, 1), got {alpha_half}")
    stream = as_stream(stream, ("positive_stable",))
    out = np.empty(int(size))
    _kernels.positive_stable_bulk(out, float(alpha_half), stream.key[0], stream.key[1],
                                  0, stream.cursor)
    stream.cursor += 1
    return out


def sample_isotropic_increment(law: IncrementLaw, stream, size: int = 1) -> np.ndarray:
    """Draw ``size`` i.i.d. increments, shape (size, d)."""
    if isinstance(law, StableParams):
        law = IncrementLaw.exact(law)
    stream = as_stream(stream, ("increment",))
    out = np.empty((int(size), law.dim))
    code, lawp, tab = law.kernel_args()
    _kernels.fill_increments(out, 0, stream.cursor, stream.key[0], stream.key[1], code, lawp, tab)
    stream.cursor += 1
    return out


def density_difference_bound(law: IncrementLaw, y) -> np.ndarray:
    """|p_X(y) - p_Z(y)| = eps |phi1(y) - phi2(y)|; zero outside B(0, r3)."""
    if law.variant != "perturbed":
        raise ValueError("density_difference_bound needs a perturbed law")
    rad = np.linalg.norm(np.atleast_2d(np.asarray(y, dtype=float)), axis=-1)
    out = law.eps_pert * np.abs(law._phi1(rad) - law._phi2(rad))
    return out if np.ndim(y) > 1 else out[0]


# ----------------------------------------------------------------------------
# Poisson kernel of a centred ball

def poisson_constant(params: StableParams) -> float:
    d, a = params.dim, params.alpha
    return math.gamma(d / 2) * math.sin(math.pi * a / 2) / math.pi ** (d / 2 + 1)


def poisson_ball_density(params: StableParams, r: float, theta, w) -> np.ndarray:
    """Exit density P_r(theta, w) of Z started at theta from B(0, r).

    P_r(theta, w) = c ((r^2 - |theta|^2) / (|w|^2 - r^2))^{alpha/2} |w - theta|^{-d}
    with c = Gamma(d/2) sin(pi alpha/2) / pi^{d/2+1}.
    """
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(w, dtype=float)
    t2 = float(theta @ theta)
    w2 = np.sum(w * w, axis=-1)
    if t2 >= r * r:
        raise ValueError("theta must lie strictly inside the ball")
    if np.any(w2 <= r * r):
        raise ValueError("w must lie strictly outside the ball")
    dist = np.linalg.norm(w - theta, axis=-1)
    return (poisson_constant(params) * ((r * r - t2) / (w2 - r * r)) ** (params.alpha / 2)
            * dist ** (-params.dim))


def poisson_mass(params: StableParams, r: float, theta, rho=np.inf) -> float:
    """int_{r < |w| < rho} P_r(theta, w) dw by nested quadrature.

    Axial symmetry about theta reduces the integral to the exit radius and
    the angle between w and theta.  With v = 1 - r^2/|w|^2 the radial factor
    becomes v^{-alpha/2} (1-v)^{alpha/2 - 1 - d/2} times smooth terms, handled
    by algebraic-weight quadrature.  ``rho = inf`` gives the total mass.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    a, d = params.alpha, params.dim
    t = float(np.linalg.norm(theta))
    if t >= r:
        raise ValueError("theta must lie strictly inside the ball")
    c = poisson_constant(params) * (r * r - t * t) ** (a / 2)

    def angular(rho):
        # int over the unit sphere of |rho u - theta|^{-d}
        if d == 1:
            return abs(rho - t) ** (-1) + (rho + t) ** (-1)
        if t == 0.0:
            return sphere_area(d) * rho ** (-d)
        f = lambda phi: (np.sin(phi) ** (d - 2)
                         * (rho * rho + t * t - 2 * rho * t * np.cos(phi)) ** (-d / 2))
        return sphere_area(d - 1) * integrate.quad(f, 0.0, math.pi, epsabs=0.0, epsrel=1e-12,
                                                   limit=200)[0]

    def g(v):
        # everything but the weight v^{-a/2} (1-v)^{a/2-1}
        if v >= 1.0:
            return 0.5 * r ** (-a) * sphere_area(d) if d > 1 else r ** (-a)
        rho = r / math.sqrt(1.0 - v)
        return 0.5 * r ** (d - a) * angular(rho) * (rho / r) ** d

    if rho <= r:
        return 0.0
    if np.isinf(rho):
        val, _ = integrate.quad(g, 0.0, 1.0, weight="alg", wvar=(-a / 2, a / 2 - 1),
                                epsabs=0.0, epsrel=1e-12, limit=200)
    else:
        v_max = 1.0 - (r / rho) ** 2
        val, _ = integrate.quad(lambda v: g(v) * (1.0 - v) ** (a / 2 - 1), 0.0, v_max,
                                weight="alg", wvar=(-a / 2, 0.0), epsabs=0.0, epsrel=1e-12,
                                limit=200)
    return c * val


def poisson_normalization(params: StableParams, r: float, theta) -> float:
    """Total mass of the ball Poisson kernel (1 up to quadrature error)."""
    return poisson_mass(params, r, theta)


def exit_radius_cdf(params: StableParams, rho, r: float = 1.0):
    """P(|w| <= rho) for the exit from B(0, r) started at the centre.

    With v = 1 - r^2/|w|^2 the law of v is Beta(1 - alpha/2, alpha/2).
    """
    rho = np.asarray(rho, dtype=float)
    v = np.clip(1.0 - (r / np.maximum(rho, r)) ** 2, 0.0, 1.0)
    return special.betainc(1.0 - params.alpha / 2, params.alpha / 2, v)


def _uniform_directions(stream: Stream, n: int, d: int) -> np.ndarray:
    g = stream.normals(n, d)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _centred_exit(params: StableParams, r: float, stream: Stream, n: int) -> np.ndarray:
    u = stream.uniforms(n, 1)[:, 0]
    # 1 - V ~ Beta(alpha/2, 1 - alpha/2); inverting it directly keeps the far tail finite
    w = special.betaincinv(params.alpha / 2, 1.0 - params.alpha / 2, u)
    rad = r / np.sqrt(w)
    return rad[:, None] * _uniform_directions(stream, n, params.dim)


def sample_ball_exit(params: StableParams, r: float, theta, stream, size: int = 1,
                     max_iter: int = 10_000) -> np.ndarray:
    """Draw exit positions of Z from B(0, r) started at ``theta``.

    The centred case inverts the radial law exactly; an off-centre start uses
    rejection against the centred law with envelope constant
    (1 - t^2)^{alpha/2} (1 - t)^{-d}, t = |theta|/r.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != params.dim:
        raise ValueError("theta has the wrong dimension")
    t = float(np.linalg.norm(theta)) / r
    if t >= 1.0:
        raise ValueError("theta must lie strictly inside the ball")
    stream = as_stream(stream, ("ball_exit",))
    n = int(size)
    if t == 0.0:
        return _centred_exit(params, r, stream, n)
    a, d = params.alpha, params.dim
    log_env = (a / 2) * math.log(1.0 - t * t) - d * math.log(1.0 - t)
    out = np.empty((n, d))
    todo = np.arange(n)
    proposed = 0
    for _ in range(max_iter):
        m = todo.size
        w = _centred_exit(params, r, stream, m)
        u = stream.uniforms(m, 1)[:, 0]
        proposed += m
        w2 = np.sum(w * w, axis=1)
        log_ratio = ((a / 2) * np.log((r * r - t * t * r * r) / (r * r))
                     + d * (np.log(np.sqrt(w2)) - np.log(np.linalg.norm(w - theta, axis=1))))
        ok = np.log(u) < log_ratio - log_env
        out[todo[ok]] = w[ok]
        todo = todo[~ok]
        if todo.size == 0:
            return out
    rate = (n - todo.size) / max(proposed, 1)
    raise RejectionCapError(
        f"ball-exit rejection exceeded {max_iter} rounds (acceptance rate {rate:.3g})", rate)
