"""Metaball implicit surfaces.

A Metaball is the level set ``f(x) = sum_i k_i / |x - c_i|^2 = 1``.  Values
above the surface level are inside the particle, values below are outside.
All functions here are pure; a :class:`Metaball` is immutable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

SINGULAR_RTOL = 1e-12
RAY_SCAN_SAMPLES = 64
RAY_T_TOL = 1e-12


class SingularEvaluationError(ValueError):
    """Raised when a Metaball is evaluated on top of a control point."""


class EmptyLevelSetError(ValueError):
    """Raised when a Metaball encloses no volume."""


@dataclass(frozen=True)
class ControlPoint:
    position: tuple[float, float, float]
    weight: float


@dataclass(frozen=True, eq=False)
class Metaball:
    """Weighted control points plus a sphero (dilation) radius.

    ``centers`` has shape (n, 3) and ``weights`` shape (n,).  Both are
    stored as read-only float arrays.
    """

    centers: np.ndarray
    weights: np.ndarray
    sphero_radius: float = 0.0
    surface_level: float = 1.0
    _scale: float = field(init=False, repr=False)

    def __post_init__(self):
        c = np.array(self.centers, dtype=float).reshape(-1, 3)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if len(c) == 0:
            raise ValueError("a Metaball needs at least one control point")
        if len(c) != len(w):
            raise ValueError(f"{len(c)} centers but {len(w)} weights")
        if self.sphero_radius < 0:
            raise ValueError("sphero_radius must be >= 0")
        c.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "weights", w)
        wmax = float(np.max(np.abs(w)))
        object.__setattr__(self, "_scale", np.sqrt(wmax) if wmax > 0 else 1.0)

    @classmethod
    def sphere(cls, radius: float, center=(0.0, 0.0, 0.0), sphero_radius: float = 0.0):
        return cls(np.asarray(center, float)[None, :], [radius * radius], sphero_radius)

    @classmethod
    def from_control_points(cls, points, sphero_radius: float = 0.0):
        return cls([p.position for p in points], [p.weight for p in points], sphero_radius)

    @property
    def control_points(self) -> list[ControlPoint]:
        return [ControlPoint(tuple(c), float(k)) for c, k in zip(self.centers, self.weights)]

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def scale(self) -> float:
        """Characteristic length, sqrt of the largest |weight|."""
        return self._scale

    def with_weights(self, weights) -> "Metaball":
        return Metaball(self.centers, weights, self.sphero_radius, self.surface_level)

    def translated(self, offset) -> "Metaball":
        return Metaball(self.centers + np.asarray(offset, float), self.weights,
                        self.sphero_radius, self.surface_level)

    def dilated(self) -> "Metaball":
        """Grow every ball radius by the sphero radius (exact for one ball)."""
        k = np.where(self.weights > 0,
                     (np.sqrt(np.clip(self.weights, 0, None)) + self.sphero_radius) ** 2,
                     self.weights)
        return Metaball(self.centers, k, 0.0, self.surface_level)


def _sq_dist(mb: Metaball, x: np.ndarray) -> np.ndarray:
    d = x[..., None, :] - mb.centers
    return d, np.einsum("...j,...j->...", d, d)


def _check_singular(mb: Metaball, r2: np.ndarray):
    if np.any(r2 <= (SINGULAR_RTOL * mb.scale) ** 2):
        raise SingularEvaluationError("evaluation point coincides with a control point")


def evaluate(mb: Metaball, x) -> float | np.ndarray:
    """Metaball value at ``x`` (shape (3,) or (..., 3))."""
    x = np.asarray(x, dtype=float)
    _, r2 = _sq_dist(mb, x)
    _check_singular(mb, r2)
    out = (mb.weights / r2).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def field_values(mb: Metaball, x) -> np.ndarray:
    """Bulk evaluation for grids: never raises, returns +-inf on control points."""
    x = np.asarray(x, dtype=float)
    _, r2 = _sq_dist(mb, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(r2 > 0, mb.weights / np.where(r2 > 0, r2, 1.0), np.copysign(np.inf, mb.weights))
        return terms.sum(axis=-1)


def gradient(mb: Metaball, x) -> np.ndarray:
    """Spatial gradient of the Metaball; points inward (toward larger f)."""
    x = np.asarray(x, dtype=float)
    d, r2 = _sq_dist(mb, x)
    _check_singular(mb, r2)
    coef = -2.0 * mb.weights / (r2 * r2)
    return np.einsum("...i,...ij->...j", coef, d)


def hessian(mb: Metaball, x) -> np.ndarray:
    """3x3 Hessian of f at a single point."""
    x = np.asarray(x, dtype=float)
    d = x - mb.centers
    r2 = np.einsum("ij,ij->i", d, d)
    _check_singular(mb, r2)
    a = -2.0 * mb.weights / (r2 * r2)
    b = 8.0 * mb.weights / (r2 * r2 * r2)
    return a.sum() * np.eye(3) + np.einsum("i,ij,ik->jk", b, d, d)


def value_grad_hess(mb: Metaball, x):
    x = np.asarray(x, dtype=float)
    d = x - mb.centers
    r2 = np.einsum("ij,ij->i", d, d)
    _check_singular(mb, r2)
    inv2 = 1.0 / r2
    f = float(mb.weights @ inv2)
    a = -2.0 * mb.weights * inv2 * inv2
    g = a @ d
    b = 8.0 * mb.weights * inv2 * inv2 * inv2
    h = a.sum() * np.eye(3) + np.einsum("i,ij,ik->jk", b, d, d)
    return f, g, h


def ray_surface_parameter(mb: Metaball, origin, direction, level: float = 1.0,
                          max_t: float = 1.0) -> float | None:
    """Smallest t in (0, max_t] with f(origin + t*direction) == level.

    The ray is scanned at 64 samples for the first sign change and the
    bracket is bisected down to 1e-12 in t.  Returns None if there is no
    crossing.
    """
    t = ray_surface_parameters(mb, np.asarray(origin, float)[None, :],
                               np.asarray(direction, float)[None, :], level, max_t)[0]
    return None if np.isnan(t) else float(t)


@numba.njit(cache=True)
def _ray_value(c, k, ox, oy, oz, dx, dy, dz, t):
    acc = 0.0
    for m in range(len(k)):
        rx = ox + t * dx - c[m, 0]
        ry = oy + t * dy - c[m, 1]
        rz = oz + t * dz - c[m, 2]
        r2 = rx * rx + ry * ry + rz * rz
        if r2 == 0.0:
            return np.inf if k[m] > 0 else -np.inf
        acc += k[m] / r2
    return acc


@numba.njit(cache=True)
def _ray_kernel(c, k, o, d, level, max_t, samples, n_iter, out):
    for r in range(o.shape[0]):
        ox, oy, oz = o[r, 0], o[r, 1], o[r, 2]
        dx, dy, dz = d[r, 0], d[r, 1], d[r, 2]
        out[r] = np.nan
        lo = 0.0
        hi = -1.0
        for j in range(1, samples + 1):
            t = max_t * j / samples
            if _ray_value(c, k, ox, oy, oz, dx, dy, dz, t) >= level:
                hi = t
                break
            lo = t
        if hi < 0.0:
            continue
        for _ in range(n_iter):
            mid = 0.5 * (lo + hi)
            if _ray_value(c, k, ox, oy, oz, dx, dy, dz, mid) >= level:
                hi = mid
            else:
                lo = mid
        # the bracket is below 1e-12; one secant step pins the residual
        flo = _ray_value(c, k, ox, oy, oz, dx, dy, dz, lo) - level
        fhi = _ray_value(c, k, ox, oy, oz, dx, dy, dz, hi) - level
        t = hi
        if fhi != flo:
            ts = lo - flo * (hi - lo) / (fhi - flo)
            if np.isfinite(ts) and lo <= ts <= hi:
                t = ts
        out[r] = t


def ray_surface_parameters(mb: Metaball, origins, directions, level: float = 1.0,
                           max_t: float = 1.0, samples: int = RAY_SCAN_SAMPLES) -> np.ndarray:
    """Vectorised :func:`ray_surface_parameter`; NaN marks rays that miss."""
    o = np.ascontiguousarray(np.asarray(origins, float).reshape(-1, 3))
    dvec = np.ascontiguousarray(np.broadcast_to(np.asarray(directions, float).reshape(-1, 3), o.shape))
    if max_t <= 0:
        raise ValueError("max_t must be positive")
    n_iter = int(np.ceil(np.log2(max(max_t / samples, RAY_T_TOL) / RAY_T_TOL))) + 2
    out = np.empty(len(o))
    _ray_kernel(np.ascontiguousarray(mb.centers), np.ascontiguousarray(mb.weights), o, dvec,
                float(level), float(max_t), int(samples), n_iter, out)
    return out


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)


def bounding_box(mb: Metaball, margin: float = 0.0) -> Box:
    """Axis-aligned box holding the f >= 1 region dilated by R_s + margin.

    If f(x) >= 1 with n_pos positive weights, some term k_i/r_i^2 is at
    least 1/n_pos, so x lies within sqrt(n_pos*k_i) of that control point.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    pos = mb.weights > 0
    level = mb.surface_level
    if not pos.any():
        c = mb.centers.mean(axis=0)
        return Box(c - margin - mb.sphero_radius, c + margin + mb.sphero_radius)
    r = np.sqrt(pos.sum() * mb.weights[pos] / level)
    c = mb.centers[pos]
    pad = mb.sphero_radius + margin
    return Box((c - r[:, None]).min(axis=0) - pad, (c + r[:, None]).max(axis=0) + pad)


@dataclass(frozen=True)
class MassProperties:
    volume: float
    mass: float
    centroid: np.ndarray
    inertia_tensor: np.ndarray


def _grid(box: Box, resolution: int):
    h = box.extent / resolution
    axes = [box.lo[a] + (np.arange(resolution) + 0.5) * h[a] for a in range(3)]
    return axes, h


def indicator_grid(mb: Metaball, resolution: int, box: Box | None = None, level=None):
    """Midpoint-sampled inside mask on a regular grid over ``box``."""
    box = box or bounding_box(mb)
    level = mb.surface_level if level is None else level
    axes, h = _grid(box, resolution)
    X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
    xy = np.stack([X, Y], axis=-1)
    mask = np.empty((resolution,) * 3, dtype=bool)
    for kz, z in enumerate(axes[2]):
        pts = np.concatenate([xy, np.full(X.shape + (1,), z)], axis=-1)
        mask[:, :, kz] = field_values(mb, pts) >= level
    return mask, axes, h


def mass_properties(mb: Metaball, density: float = 1.0, resolution: int = 128,
                    dilate: bool = False) -> MassProperties:
    """Volume, centroid and body-frame inertia about the centroid.

    Regular-grid midpoint integration of the indicator f >= level over the
    bounding box.  With ``dilate`` the weights are first grown so each ball
    radius increases by the sphero radius.
    """
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    shape = mb.dilated() if dilate else mb
    if not np.all(bounding_box(shape).extent > 0):
        raise EmptyLevelSetError("Metaball level set is empty")
    mask, axes, h = indicator_grid(shape, resolution)
    count = int(mask.sum())
    if count == 0:
        raise EmptyLevelSetError("Metaball level set is empty")
    dv = float(np.prod(h))
    idx = np.nonzero(mask)
    pts = np.stack([axes[a][idx[a]] for a in range(3)], axis=1)
    volume = count * dv
    centroid = pts.mean(axis=0)
    r = pts - centroid
    r2 = np.einsum("ij,ij->i", r, r)
    second = r.T @ r
    inertia = (np.eye(3) * r2.sum() - second) * dv
    # midpoint rule drops each voxel's own second moment
    inertia += np.diag([h[1] ** 2 + h[2] ** 2, h[0] ** 2 + h[2] ** 2, h[0] ** 2 + h[1] ** 2]) * volume / 12.0
    return MassProperties(volume, density * volume, centroid, density * inertia)


def hydrodynamic_level(mb: Metaball) -> float:
    """Level c_0 of the sphero-dilated surface used by the fluid solver.

    Average over the six axis directions of f evaluated one sphero radius
    outward from the level-1 surface point on that axis ray.  Exactly 1 when
    the sphero radius is zero.
    """
    if mb.sphero_radius == 0:
        return mb.surface_level
    box = bounding_box(mb)
    center = mb.centers[mb.weights > 0].mean(axis=0) if (mb.weights > 0).any() else mb.centers.mean(axis=0)
    reach = float(np.max(box.extent)) * 2.0
    vals = []
    for a in range(3):
        for s in (-1.0, 1.0):
            d = np.zeros(3)
            d[a] = s
            start = center + reach * d
            t = ray_surface_parameter(mb, start, -d, mb.surface_level, reach)
            if t is None:
                continue
            p = start - t * d
            g = gradient(mb, p)
            outward = -g / np.linalg.norm(g)
            vals.append(evaluate(mb, p + mb.sphero_radius * outward))
    if not vals:
        raise EmptyLevelSetError("could not locate the Metaball surface")
    return float(np.mean(vals))


def rotation_matrix(q) -> np.ndarray:
    """Rotation matrix from a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
