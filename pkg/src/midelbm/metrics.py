"""Post-processing: Reynolds number, shape descriptors and DKT phases."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from . import geometry as geo


def peak_speed(records, pid: int | None = None) -> float:
    """Largest particle speed over a record series (or an (T, 3) velocity array)."""
    if isinstance(records, np.ndarray):
        v = records.reshape(-1, 3)
    else:
        if len(records) == 0:
            raise ValueError("empty record series")
        v = np.concatenate([r.velocity if pid is None else r.velocity[pid:pid + 1] for r in records])
    return float(np.linalg.norm(v, axis=1).max()) if len(v) else 0.0


def reynolds(records, density: float, viscosity: float, d_e: float, pid: int | None = None) -> float:
    """Re = rho_f * U_peak * D_e / mu with ``viscosity`` the dynamic viscosity."""
    if viscosity <= 0:
        raise ValueError("viscosity must be positive")
    return density * peak_speed(records, pid) * d_e / viscosity


def equivalent_diameter(volume: float) -> float:
    return float(np.cbrt(6.0 * volume / np.pi))


def schiller_naumann(re: float) -> float:
    """Drag correction factor relative to Stokes, valid for Re < ~800."""
    return 1.0 + 0.15 * re ** 0.687


# --- shape descriptors ---------------------------------------------------

@dataclass(frozen=True)
class ShapeDescriptors:
    sphericity: float
    dn_over_ds: float
    csf: float
    volume: float
    area: float
    d_n: float
    d_s: float
    extents: tuple  # shortest, intermediate, longest

    def row(self) -> str:
        return f"{self.sphericity:.4f} {self.dn_over_ds:.4f} {self.csf:.4f}"


def _sample_grid(mb: geo.Metaball, resolution: int):
    box = geo.bounding_box(mb)
    if not box.extent.max() > 0:
        raise geo.EmptyLevelSetError("level set is empty")
    pad = 2.0 * box.extent.max() / resolution
    lo, hi = box.lo - pad, box.hi + pad
    h = (hi - lo).max() / resolution
    n = np.ceil((hi - lo) / h).astype(int) + 1
    axes = [lo[a] + np.arange(n[a]) * h for a in range(3)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return geo.field_values(mb, X), lo, h


def surface_mesh(mb: geo.Metaball, resolution: int = 128):
    """Marching-cubes triangulation of the outer surface (sphero shell included)."""
    shape = mb.dilated() if mb.sphero_radius > 0 else mb
    vals, lo, h = _sample_grid(shape, resolution)
    level = shape.surface_level
    if not (vals >= level).any():
        raise geo.EmptyLevelSetError("level set is empty")
    vals = np.minimum(vals, 1e6 * level)
    verts, faces, _, _ = measure.marching_cubes(vals, level=level, spacing=(h, h, h))
    return verts + lo, faces


def shape_descriptors(mb: geo.Metaball, resolution: int = 128) -> ShapeDescriptors:
    """Sphericity, d_n/d_s and Corey shape factor of a Metaball.

    A_p is the largest of the projected areas along the three principal
    axes; extents are measured along the principal axes.
    """
    verts, faces = surface_mesh(mb, resolution)
    area = float(measure.mesh_surface_area(verts, faces))
    mp = geo.mass_properties(mb, 1.0, resolution, dilate=mb.sphero_radius > 0)
    d_n = equivalent_diameter(mp.volume)
    _, vecs = np.linalg.eigh(mp.inertia_tensor)
    proj = (verts - mp.centroid) @ vecs
    ext = np.sort(proj.max(axis=0) - proj.min(axis=0))
    a_p = max(_projected_area(mb, mp.centroid, vecs, a, resolution) for a in range(3))
    d_s = float(np.sqrt(4.0 * a_p / np.pi))
    return ShapeDescriptors(
        sphericity=float(np.pi * d_n ** 2 / area),
        dn_over_ds=d_n / d_s,
        csf=float(ext[0] / np.sqrt(ext[1] * ext[2])),
        volume=mp.volume, area=area, d_n=d_n, d_s=d_s, extents=tuple(float(e) for e in ext))


def _projected_area(mb, centroid, frame, axis, resolution) -> float:
    """Shadow area along principal axis ``axis`` by column occupancy."""
    shape = mb.dilated() if mb.sphero_radius > 0 else mb
    box = geo.bounding_box(shape)
    corners = np.array([[x, y, z] for x in (box.lo[0], box.hi[0]) for y in (box.lo[1], box.hi[1])
                        for z in (box.lo[2], box.hi[2])])
    yc = (corners - centroid) @ frame
    lo, hi = yc.min(axis=0), yc.max(axis=0)
    h = (hi - lo).max() / resolution
    n = np.ceil((hi - lo) / h).astype(int)
    axes = [lo[a] + (np.arange(n[a]) + 0.5) * h for a in range(3)]
    Y = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    inside = geo.field_values(shape, centroid + Y @ frame.T) >= shape.surface_level
    shadow = inside.any(axis=axis)
    return float(shadow.sum() * h * h)


# --- drafting, kissing, tumbling ------------------------------------------

@dataclass(frozen=True)
class DktMetrics:
    time: np.ndarray          # t / t_r
    height: np.ndarray        # (T, 2) vertical position / H
    distance: np.ndarray      # centre distance / D_e
    velocity: np.ndarray      # (T, 2, 3) / sqrt(H g)
    angular_speed: np.ndarray  # (T, 2) |omega| t_r / (2 pi)
    t_drafting: float | None
    t_kissing: float | None
    t_tumbling: float | None

    @property
    def sequence(self) -> list[str]:
        ev = [(t, name) for t, name in ((self.t_drafting, "drafting"), (self.t_kissing, "kissing"),
                                          (self.t_tumbling, "tumbling")) if t is not None]
        return [name for _, name in sorted(ev)]


def dkt_metrics(records, H: float, d_e: float, g: float, radii=None,
                vertical_axis: int = 2, kiss_factor: float = 1.05) -> DktMetrics:
    """Normalised two-particle series plus detected phase times.

    Kissing is a centre distance below ``kiss_factor`` times the summed
    radii (equivalent radii ``d_e/2`` when ``radii`` is omitted).  Drafting
    starts where the distance begins its last monotone decrease before
    kissing; tumbling is the first change of the vertical rank order.
    """
    if len(records) == 0:
        raise ValueError("empty record series")
    pos = np.array([r.position for r in records])
    if pos.ndim != 3 or pos.shape[1] != 2:
        raise ValueError(f"dkt_metrics needs exactly two particles, got {pos.shape[1] if pos.ndim == 3 else 0}")
    if H <= 0 or g <= 0 or d_e <= 0:
        raise ValueError("H, g and d_e must be positive")
    t = np.array([r.time for r in records])
    vel = np.array([r.velocity for r in records])
    omg = np.array([r.angular_velocity for r in records])
    t_r = np.sqrt(H / g)
    dist = np.linalg.norm(pos[:, 0] - pos[:, 1], axis=1)
    r0, r1 = (0.5 * d_e, 0.5 * d_e) if radii is None else radii
    kissing = np.nonzero(dist < kiss_factor * (r0 + r1))[0]
    i_kiss = int(kissing[0]) if len(kissing) else None
    i_draft = None
    end = i_kiss if i_kiss is not None else int(np.argmin(dist))
    if end > 0 and dist[end] < dist[0]:
        j = end
        while j > 0 and dist[j - 1] > dist[j]:
            j -= 1
        i_draft = j
    z = pos[:, :, vertical_axis]
    dz = z[:, 0] - z[:, 1]
    i_tumble = None
    if dz[0] != 0:
        start = i_kiss if i_kiss is not None else 0
        swap = np.nonzero(np.sign(dz[start:]) == -np.sign(dz[0]))[0]
        if len(swap):
            i_tumble = int(start + swap[0])

    def at(i):
        return None if i is None else float(t[i] / t_r)

    return DktMetrics(
        time=t / t_r, height=z / H, distance=dist / d_e, velocity=vel / np.sqrt(H * g),
        angular_speed=np.linalg.norm(omg, axis=2) * t_r / (2 * np.pi),
        t_drafting=at(i_draft), t_kissing=at(i_kiss), t_tumbling=at(i_tumble))
