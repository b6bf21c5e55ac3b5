"""Right circular cones with axis e_d: membership, axis angle, boundary distance."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConeSpec:
    """Open cone {x : angle(x, e_d) < theta} in R^dim.

    ``beta`` is an optional slot for the cone index once known or estimated
    (alpha/2 for the half-space).
    """

    dim: int
    theta: float
    beta: float | None = None

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        theta = float(self.theta)
        if not 0.0 < theta < math.pi:
            raise ValueError(f"theta must lie in (0, pi), got {theta}")
        if self.dim == 1 and theta != math.pi / 2:
            raise ValueError("in one dimension only the half-line theta = pi/2 is a cone")
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "theta", theta)

    @property
    def is_halfspace(self) -> bool:
        return self.theta == math.pi / 2

    @property
    def cos_theta(self) -> float:
        # exact zero for the half-space so membership reduces to x_d > 0
        return 0.0 if self.is_halfspace else math.cos(self.theta)

    @property
    def axis(self) -> np.ndarray:
        e = np.zeros(self.dim)
        e[-1] = 1.0
        return e


def _points(cone: ConeSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != cone.dim:
        raise ValueError(f"expected points of dimension {cone.dim}, got shape {x.shape}")
    return x


def axis_angle(x) -> np.ndarray:
    """Angle between x and e_d, via atan2 for accuracy near the axis."""
    x = np.asarray(x, dtype=float)
    lateral = np.linalg.norm(x[..., :-1], axis=-1)
    return np.arctan2(lateral, x[..., -1])


def contains(cone: ConeSpec, x):
    """True iff x != 0 and angle(x, e_d) < theta.

    Evaluated as x_d > |x| cos(theta), the same test the walk kernels use;
    boundary points are outside.
    """
    x = _points(cone, x)
    norm = np.linalg.norm(x, axis=-1)
    out = (norm > 0) & (x[..., -1] > norm * cone.cos_theta)
    return bool(out) if out.ndim == 0 else out


def dist_to_boundary(cone: ConeSpec, x):
    """delta(x) = dist(x, boundary of the cone) for interior x.

    |x| sin(theta - psi) while the foot of the perpendicular lies on a
    boundary ray, otherwise |x| (the apex is nearest).
    """
    x = _points(cone, x)
    inside = contains(cone, x)
    if not np.all(inside):
        raise ValueError("dist_to_boundary requires interior points")
    norm = np.linalg.norm(x, axis=-1)
    if cone.is_halfspace:
        out = x[..., -1].copy() if x.ndim > 1 else x[-1]
        return out
    gap = cone.theta - axis_angle(x)
    out = np.where(gap <= math.pi / 2, norm * np.sin(np.minimum(gap, math.pi / 2)), norm)
    return float(out) if np.ndim(out) == 0 else out


def sample_interior_grid(cone: ConeSpec, radii, angles) -> np.ndarray:
    """Points r (sin psi, 0, ..., 0, cos psi) for r in radii, psi in angles.

    Returns an array of shape (len(radii) * len(angles), dim), radii outermost.
    """
    radii = np.asarray(radii, dtype=float).reshape(-1)
    angles = np.asarray(angles, dtype=float).reshape(-1)
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    if np.any(angles < 0) or np.any(angles >= cone.theta):
        raise ValueError("angles must lie in [0, theta)")
    if cone.dim == 1 and np.any(angles > 0):
        raise ValueError("a one-dimensional cone only has the axis direction")
    r, psi = np.meshgrid(radii, angles, indexing="ij")
    pts = np.zeros((r.size, cone.dim))
    if cone.dim > 1:
        pts[:, 0] = (r * np.sin(psi)).ravel()
    pts[:, -1] = (r * np.cos(psi)).ravel()
    return pts
