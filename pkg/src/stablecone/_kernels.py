"""Compiled inner loops: increment draws and killed-walk simulation.

All kernels release the GIL so the orchestrator can run chunks on a thread
pool.  Law parameters travel as a flat float array::

    lawp = [alpha, eps_pert, r1, r2, r3, phi2_value]

and ``law_code`` is 0 for the exact stable law, 1 for the perturbed law.
``tab`` holds p_Z on a uniform radial grid over ``[r2, r3]`` (perturbed only).
"""
import math

import numba as nb
import numpy as np

from .rng import LANE_INCREMENT, LANE_WALK, block_uniforms

EXACT = 0
PERTURBED = 1
MAX_ATTEMPTS = 10_000


@nb.njit(inline="always")
def positive_stable(a, u_angle, u_exp):
    """Kanter's representation: Laplace transform exp(-lambda**a), 0<a<1."""
    U = math.pi * u_angle
    E = -math.log(u_exp)
    sin_u = math.sin(U)
    # (1/a) = c + 1 with c = (1-a)/a, which folds the three powers into one
    c = (1.0 - a) / a
    return (math.sin(a * U) / sin_u
            * math.exp(c * math.log(math.sin((1.0 - a) * U) / (E * sin_u))))


@nb.njit(inline="always")
def _normals_into(out, start, count, k0, k1, c0, c1, blk, lane):
    """Write ``count`` normals into out[start:]; returns next block index."""
    j = 0
    while j < count:
        u0, u1, u2, u3 = block_uniforms(k0, k1, c0, c1, np.uint64(blk), lane)
        blk += 1
        r = math.sqrt(-2.0 * math.log(u0))
        out[start + j] = r * math.cos(2.0 * math.pi * u1)
        if j + 1 < count:
            out[start + j + 1] = r * math.sin(2.0 * math.pi * u1)
        if j + 2 < count:
            r = math.sqrt(-2.0 * math.log(u2))
            out[start + j + 2] = r * math.cos(2.0 * math.pi * u3)
            if j + 3 < count:
                out[start + j + 3] = r * math.sin(2.0 * math.pi * u3)
        j += 4
    return blk


@nb.njit(inline="always")
def draw_exact(z, alpha, k0, k1, c0, c1, blk, lane):
    """Z = sqrt(2A) G with A positive (alpha/2)-stable; returns next block."""
    d = z.shape[0]
    u0, u1, u2, u3 = block_uniforms(k0, k1, c0, c1, np.uint64(blk), lane)
    blk += 1
    scale = math.sqrt(2.0 * positive_stable(0.5 * alpha, u0, u1))
    r = math.sqrt(-2.0 * math.log(u2))
    z[0] = r * math.cos(2.0 * math.pi * u3)
    if d > 1:
        z[1] = r * math.sin(2.0 * math.pi * u3)
    if d > 2:
        blk = _normals_into(z, 2, d - 2, k0, k1, c0, c1, blk, lane)
    for i in range(d):
        z[i] *= scale
    return blk


@nb.njit(inline="always")
def _norm(z):
    s = 0.0
    for i in range(z.shape[0]):
        s += z[i] * z[i]
    return math.sqrt(s)


@nb.njit(inline="always")
def _interp(tab, r0, dr, r):
    t = (r - r0) / dr
    i = int(t)
    if i < 0:
        return tab[0]
    if i >= tab.shape[0] - 1:
        return tab[tab.shape[0] - 1]
    w = t - i
    return (1.0 - w) * tab[i] + w * tab[i + 1]


@nb.njit(inline="always")
def draw_increment(z, law_code, lawp, tab, k0, k1, c0, c1, lane):
    """One increment of the walk.  Returns the number of rejected attempts."""
    alpha = lawp[0]
    if law_code == EXACT:
        draw_exact(z, alpha, k0, k1, c0, c1, 0, lane)
        return 0
    eps = lawp[1]
    r1 = lawp[2]
    r2 = lawp[3]
    r3 = lawp[4]
    phi2 = lawp[5]
    d = z.shape[0]
    u0, u1, u2, u3 = block_uniforms(k0, k1, c0, c1, np.uint64(0), lane)
    blk = 1
    if u0 < eps:
        # uniform point of B(0, r1): Gaussian direction, radius r1 * U**(1/d)
        blk = _normals_into(z, 0, d, k0, k1, c0, c1, blk, lane)
        nz = _norm(z)
        rad = r1 * u1 ** (1.0 / d)
        for i in range(d):
            z[i] *= rad / nz
        return 0
    for attempt in range(MAX_ATTEMPTS):
        blk = draw_exact(z, alpha, k0, k1, c0, c1, blk, lane)
        r = _norm(z)
        if r2 < r < r3:
            accept = 1.0 - eps * phi2 / _interp(tab, r2, (r3 - r2) / (tab.shape[0] - 1), r)
            v0, v1, v2, v3 = block_uniforms(k0, k1, c0, c1, np.uint64(blk), lane)
            blk += 1
            if v0 < accept:
                return attempt
        else:
            return attempt
    return MAX_ATTEMPTS


@nb.njit(nogil=True, cache=True)
def fill_increments(out, item0, cursor, k0, k1, law_code, lawp, tab):
    """Bulk i.i.d. increments: row i uses counter (item0+i, cursor, *, lane)."""
    n, d = out.shape
    z = np.empty(d)
    for i in range(n):
        draw_increment(z, law_code, lawp, tab, k0, k1, np.uint64(item0 + i),
                       np.uint64(cursor), np.uint64(LANE_INCREMENT))
        for j in range(d):
            out[i, j] = z[j]


@nb.njit(nogil=True, cache=True)
def positive_stable_bulk(out, a, k0, k1, item0, cursor):
    from_lane = np.uint64(LANE_INCREMENT)
    for i in range(out.shape[0]):
        u0, u1, u2, u3 = block_uniforms(k0, k1, np.uint64(item0 + i), np.uint64(cursor),
                                        np.uint64(0), from_lane)
        out[i] = positive_stable(a, u0, u1)


@nb.njit(inline="always")
def inside_cone(x, norm_x, cos_theta):
    # angle(x, e_d) < theta  <=>  x_d > |x| cos(theta); the origin is outside
    return norm_x > 0.0 and x[x.shape[0] - 1] > norm_x * cos_theta


@nb.njit(nogil=True, cache=True)
def simulate_chunk(starts, path0, k0, k1, law_code, lawp, tab, cos_theta, horizon,
                   checkpoints, tau, cp_pos, cp_max, last_pos, last_max):
    """Simulate killed walks for ``starts.shape[0]`` paths.

    tau[i] is the exit step, or horizon + 1 if the path survives the horizon.
    cp_pos[i, j] / cp_max[i, j] receive the position and the running maximum
    of |x + S(k)| at step checkpoints[j] if the path is alive there, NaN
    otherwise.  last_pos / last_max hold the state at min(tau, horizon); the
    running max includes the exit position.
    """
    n, d = starts.shape
    ncp = checkpoints.shape[0]
    x = np.empty(d)
    z = np.empty(d)
    lane = np.uint64(LANE_WALK)
    for i in range(n):
        c0 = np.uint64(path0 + i)
        for k in range(d):
            x[k] = starts[i, k]
        rmax = _norm(x)
        j = 0
        while j < ncp and checkpoints[j] == 0:
            for k in range(d):
                cp_pos[i, j, k] = x[k]
            cp_max[i, j] = rmax
            j += 1
        t_exit = horizon + 1
        for step in range(1, horizon + 1):
            draw_increment(z, law_code, lawp, tab, k0, k1, c0, np.uint64(step), lane)
            for k in range(d):
                x[k] += z[k]
            rn = _norm(x)
            if rn > rmax:
                rmax = rn
            if not inside_cone(x, rn, cos_theta):
                t_exit = step
                break
            while j < ncp and checkpoints[j] == step:
                for k in range(d):
                    cp_pos[i, j, k] = x[k]
                cp_max[i, j] = rmax
                j += 1
        tau[i] = t_exit
        for k in range(d):
            last_pos[i, k] = x[k]
        last_max[i] = rmax
        while j < ncp:
            for k in range(d):
                cp_pos[i, j, k] = np.nan
            cp_max[i, j] = np.nan
            j += 1
