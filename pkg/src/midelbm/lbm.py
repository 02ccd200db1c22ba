"""Lattice Boltzmann fluid with moving Metaball boundaries.

Internally everything is in lattice units (dx = dt = 1, reference density
1); :class:`LatticeSpec` carries the physical cell size and time step for
conversion.  Distributions are stored flat as ``f[node, direction]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from . import geometry as geo

log = logging.getLogger(__name__)

FLUID, SOLID, WALL = 0, 1, 2


class LatticeError(RuntimeError):
    pass


# --- velocity sets ---------------------------------------------------------

_D2Q9_E = [[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1], [1, 1], [-1, 1], [-1, -1], [1, -1]]
_D2Q9_W = [4 / 9] + [1 / 9] * 4 + [1 / 36] * 4
_D3Q15_E = [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
            [1, 1, 1], [-1, -1, -1], [1, 1, -1], [-1, -1, 1], [1, -1, 1], [-1, 1, -1],
            [-1, 1, 1], [1, -1, -1]]
_D3Q15_W = [2 / 9] + [1 / 9] * 6 + [1 / 72] * 8


@dataclass(frozen=True, eq=False)
class LatticeSpec:
    """Discrete velocity set plus physical cell size and time step."""

    name: str = "D3Q15"
    dx: float = 1.0
    dt: float = 1.0

    def __post_init__(self):
        if self.name == "D2Q9":
            e, w = _D2Q9_E, _D2Q9_W
        elif self.name == "D3Q15":
            e, w = _D3Q15_E, _D3Q15_W
        else:
            raise ValueError(f"unknown lattice {self.name!r}")
        e = np.array(e, dtype=np.int64)
        e3 = np.zeros((len(e), 3), dtype=np.int64)
        e3[:, : e.shape[1]] = e
        opp = np.array([int(np.nonzero((e == -ei).all(axis=1))[0][0]) for ei in e])
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "e3", e3)
        object.__setattr__(self, "e3f", e3.astype(np.float64))
        object.__setattr__(self, "w", np.array(w))
        object.__setattr__(self, "opp", opp)

    @property
    def dim(self) -> int:
        return self.e.shape[1]

    @property
    def q(self) -> int:
        return len(self.w)

    @property
    def c(self) -> float:
        return self.dx / self.dt

    cs2 = 1.0 / 3.0


def equilibrium(spec: LatticeSpec, rho, u) -> np.ndarray:
    """Second-order BGK equilibrium (lattice units); u has 3 components."""
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    eu = u @ spec.e3.T
    usq = (u * u).sum(axis=-1)
    return spec.w * rho[..., None] * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * usq[..., None])


# --- fluid parameters ------------------------------------------------------

@dataclass
class FluidConfig:
    density: float = 1000.0
    viscosity: float = 1e-3
    viscosity_unit: str = "dynamic"  # "dynamic" (Pa s) or "kinematic" (m^2/s)
    body_acceleration: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.viscosity_unit not in ("dynamic", "kinematic"):
            raise ValueError("viscosity_unit must be 'dynamic' or 'kinematic'")
        if self.density <= 0 or self.viscosity <= 0:
            raise ValueError("density and viscosity must be positive")

    @property
    def kinematic_viscosity(self) -> float:
        return self.viscosity / self.density if self.viscosity_unit == "dynamic" else self.viscosity

    @property
    def dynamic_viscosity(self) -> float:
        return self.viscosity if self.viscosity_unit == "dynamic" else self.viscosity * self.density

    def tau(self, spec: LatticeSpec) -> float:
        nu_lu = self.kinematic_viscosity * spec.dt / spec.dx ** 2
        tau = 3.0 * nu_lu + 0.5
        if tau <= 0.5:
            raise ValueError("relaxation time must exceed 0.5")
        return tau

    def accel_lattice(self, spec: LatticeSpec) -> np.ndarray:
        return np.asarray(self.body_acceleration, float) * spec.dt ** 2 / spec.dx


# --- kernels ---------------------------------------------------------------

@numba.njit(cache=True)
def _collide(f, rho, u, tau, acc, E, W):
    n, Q = f.shape
    om = 1.0 / tau
    pref = 1.0 - 0.5 * om
    ax, ay, az = acc[0], acc[1], acc[2]
    for c in range(n):
        r = rho[c]
        ux, uy, uz = u[c, 0], u[c, 1], u[c, 2]
        usq = 1.5 * (ux * ux + uy * uy + uz * uz)
        fx, fy, fz = r * ax, r * ay, r * az
        for i in range(Q):
            ex, ey, ez = E[i, 0], E[i, 1], E[i, 2]
            eu = ex * ux + ey * uy + ez * uz
            feq = W[i] * r * (1.0 + 3.0 * eu + 4.5 * eu * eu - usq)
            src = 0.0
            if fx != 0.0 or fy != 0.0 or fz != 0.0:
                src = pref * W[i] * (3.0 * ((ex - ux) * fx + (ey - uy) * fy + (ez - uz) * fz)
                                     + 9.0 * eu * (ex * fx + ey * fy + ez * fz))
            f[c, i] = f[c, i] - om * (f[c, i] - feq) + src


@numba.njit(cache=True)
def _stream(f, out, nbr):
    n, Q = f.shape
    for c in range(n):
        for i in range(Q):
            out[c, i] = f[nbr[c, i], i]


@numba.njit(cache=True)
def _moments(f, rho, u, acc, E, cls):
    n, Q = f.shape
    for c in range(n):
        if cls[c] != 0:
            continue
        r = 0.0
        mx = 0.0
        my = 0.0
        mz = 0.0
        for i in range(Q):
            g = f[c, i]
            r += g
            mx += g * E[i, 0]
            my += g * E[i, 1]
            mz += g * E[i, 2]
        rho[c] = r
        u[c, 0] = (mx + 0.5 * r * acc[0]) / r
        u[c, 1] = (my + 0.5 * r * acc[1]) / r
        u[c, 2] = (mz + 0.5 * r * acc[2]) / r


# --- field -----------------------------------------------------------------

@dataclass
class BoundaryLinks:
    """Struct-of-arrays of fluid->solid lattice links.

    ``direction`` points from the fluid node into the solid.  Wall fraction
    ``q`` is measured along that direction in cell units.  ``owner`` is the
    particle index or -1 for static domain walls.
    """

    node: np.ndarray
    direction: np.ndarray
    q: np.ndarray
    wall_point: np.ndarray
    wall_velocity: np.ndarray
    owner: np.ndarray
    ff: np.ndarray

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)), z.copy(), z.copy())

    def __len__(self):
        return len(self.node)

    @staticmethod
    def concat(parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return BoundaryLinks.empty()
        return BoundaryLinks(*[np.concatenate([getattr(p, k) for p in parts])
                               for k in ("node", "direction", "q", "wall_point",
                                         "wall_velocity", "owner", "ff")])


@dataclass
class LatticeField:
    """Distributions and macroscopic fields on a regular grid.

    ``walls`` maps axis -> (low_wall_velocity, high_wall_velocity) in
    physical units; those axes get one layer of wall nodes on each side
    and the wall surface sits half a cell beyond the last fluid node.  Other
    axes are periodic.  Node ``idx`` along a walled axis sits at
    ``(idx - 0.5) * dx``; along a periodic axis at ``(idx + 0.5) * dx``.
    """

    spec: LatticeSpec
    fluid_shape: tuple
    walls: dict = field(default_factory=dict)
    rho0: float = 1.0

    def __post_init__(self):
        spec = self.spec
        d = spec.dim
        if len(self.fluid_shape) != d:
            raise ValueError(f"{spec.name} needs a {d}-D shape")
        self.shape = tuple(n + 2 if a in self.walls else n for a, n in enumerate(self.fluid_shape))
        self.n = int(np.prod(self.shape))
        self.f = np.empty((self.n, spec.q))
        self.rho = np.full(self.n, self.rho0)
        self.u = np.zeros((self.n, 3))
        self.node_class = np.zeros(self.n, dtype=np.int8)
        self.owner = np.full(self.n, -1, dtype=np.int32)
        idx = np.indices(self.shape).reshape(d, -1).T
        offset = np.array([-0.5 if a in self.walls else 0.5 for a in range(d)])
        pos = np.zeros((self.n, 3))
        pos[:, :d] = (idx + offset) * spec.dx
        self.positions = pos
        self.index = idx
        for a in self.walls:
            edge = (idx[:, a] == 0) | (idx[:, a] == self.shape[a] - 1)
            self.node_class[edge] = WALL
        grid = np.arange(self.n).reshape(self.shape)
        self.nbr = np.empty((self.n, spec.q), dtype=np.int64)
        for i, e in enumerate(spec.e):
            # pull source x - e_i
            self.nbr[:, i] = np.roll(grid, tuple(int(v) for v in e), axis=tuple(range(d))).ravel()
        self.prev_class = self.node_class.copy()
        self.links = BoundaryLinks.empty()
        self.fresh_nodes = np.zeros(0, dtype=np.int64)
        self.ibb_fallbacks = 0
        self.wall_links = self._static_wall_links()
        self._acc = np.zeros(3)
        self._buf = np.empty_like(self.f)
        self.f[:] = equilibrium(spec, self.rho, self.u)

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.fluid_shape, float) * self.spec.dx

    def grid(self, arr) -> np.ndarray:
        return np.asarray(arr).reshape(self.shape + np.asarray(arr).shape[1:])

    def fluid_mask(self) -> np.ndarray:
        return self.node_class == FLUID

    def set_equilibrium(self, rho, u):
        self.rho[:] = rho
        u3 = np.zeros((self.n, 3))
        u3[:] = u
        self.u[:] = u3
        self.f[:] = equilibrium(self.spec, self.rho, self.u)

    def total_mass(self) -> float:
        m = self.fluid_mask()
        return float(self.f[m].sum())

    def _static_wall_links(self) -> BoundaryLinks:
        spec = self.spec
        fluid = self.node_class == FLUID
        parts = []
        for io, e in enumerate(spec.e):
            if not e.any():
                continue
            target = self.nbr[:, spec.opp[io]]  # x + e
            sel = np.nonzero(fluid & (self.node_class[target] == WALL))[0]
            if len(sel) == 0:
                continue
            uw = np.zeros((len(sel), 3))
            idx_t = self.index[target[sel]]
            for a, (vlo, vhi) in self.walls.items():
                lo = idx_t[:, a] == 0
                hi = idx_t[:, a] == self.shape[a] - 1
                uw[lo] = np.asarray(vlo, float)
                uw[hi] = np.asarray(vhi, float)
            uw *= spec.dt / spec.dx
            xw = self.positions[sel] + 0.5 * spec.e3[io] * spec.dx
            parts.append(BoundaryLinks(sel, np.full(len(sel), io), np.full(len(sel), 0.5), xw, uw,
                                       np.full(len(sel), -1), self.nbr[sel, io]))
        return BoundaryLinks.concat(parts)

    def update_moments(self):
        _moments(self.f, self.rho, self.u, self._acc, self.spec.e3f, self.node_class)


# --- operations ------------------------------------------------------------

def collide(field: LatticeField, cfg: FluidConfig):
    spec = field.spec
    acc = cfg.accel_lattice(spec)
    field._acc = acc
    _collide(field.f, field.rho, field.u, cfg.tau(spec), acc, spec.e3f, spec.w)


def stream(field: LatticeField):
    out = field._buf if field._buf.shape == field.f.shape else np.empty_like(field.f)
    _stream(field.f, out, field.nbr)
    field._buf = field.f
    field.f = out


@numba.njit(cache=True)
def _feq_dir(w, r, ex, ey, ez, ux, uy, uz):
    eu = ex * ux + ey * uy + ez * uz
    return w * r * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * (ux * ux + uy * uy + uz * uz))


@numba.njit(cache=True)
def _ibb(f, rho, u, cls, node, dirn, q, uw, ff, E, W, returned, outgoing):
    fallbacks = 0
    for k in range(len(node)):
        x = node[k]
        io = dirn[k]
        qk = q[k]
        out = f[x, io]
        r = rho[x]
        ex, ey, ez = E[io, 0], E[io, 1], E[io, 2]
        w = W[io]
        m = 6.0 * w * r * -(ex * uw[k, 0] + ey * uw[k, 1] + ez * uw[k, 2])
        outgoing[k] = out
        y = ff[k]
        if cls[y] != 0:
            fallbacks += 1
            returned[k] = out + m
            continue
        if qk <= 0.5:
            a1, a2, a3 = 2 * qk, 1 - 2 * qk, 0.0
        else:
            a1, a2, a3 = (1 - qk) / qk, 0.0, (2 * qk - 1) / qk
        b2, b3 = (1 - qk) / (1 + qk), 2 * qk / (1 + qk)
        # u_d = u*/3 + 2 u**/3 with u* and u** the two link interpolants
        c1 = a1 / 3.0
        c2 = a2 / 3.0 + 2.0 * b2 / 3.0
        c3 = a3 / 3.0 + 2.0 * b3 / 3.0
        udx = c1 * u[x, 0] + c2 * u[y, 0] + c3 * uw[k, 0]
        udy = c1 * u[x, 1] + c2 * u[y, 1] + c3 * uw[k, 1]
        udz = c1 * u[x, 2] + c2 * u[y, 2] + c3 * uw[k, 2]
        neq = out - _feq_dir(w, r, ex, ey, ez, u[x, 0], u[x, 1], u[x, 2])
        returned[k] = _feq_dir(w, r, ex, ey, ez, udx, udy, udz) + neq + m
    return fallbacks


def apply_ibb(field: LatticeField, links: BoundaryLinks, cfg: FluidConfig):
    """Returned populations for every link, from the post-collision state.

    Returns ``(returned, outgoing)``: the value to place in direction
    opp(link.direction) at the boundary node after streaming, and the
    post-collision population that left toward the wall.
    """
    spec = field.spec
    returned = np.empty(len(links))
    outgoing = np.empty(len(links))
    if len(links) == 0:
        return returned, outgoing
    field.ibb_fallbacks = _ibb(field.f, field.rho, field.u, field.node_class, links.node,
                               links.direction, links.q, links.wall_velocity, links.ff,
                               spec.e3f, spec.w, returned, outgoing)
    return returned, outgoing


@numba.njit(cache=True)
def _mem(dirn, uw, owner, wall_point, returned, outgoing, E, centers, dx, forces, torques, wall_force):
    for k in range(len(dirn)):
        io = dirn[k]
        fo, fr = outgoing[k], returned[k]
        px = fo * (E[io, 0] - uw[k, 0]) - fr * (-E[io, 0] - uw[k, 0])
        py = fo * (E[io, 1] - uw[k, 1]) - fr * (-E[io, 1] - uw[k, 1])
        pz = fo * (E[io, 2] - uw[k, 2]) - fr * (-E[io, 2] - uw[k, 2])
        o = owner[k]
        if o < 0:
            wall_force[0] += px
            wall_force[1] += py
            wall_force[2] += pz
            continue
        forces[o, 0] += px
        forces[o, 1] += py
        forces[o, 2] += pz
        if o < centers.shape[0]:
            rx = (wall_point[k, 0] - centers[o, 0]) / dx
            ry = (wall_point[k, 1] - centers[o, 1]) / dx
            rz = (wall_point[k, 2] - centers[o, 2]) / dx
            torques[o, 0] += ry * pz - rz * py
            torques[o, 1] += rz * px - rx * pz
            torques[o, 2] += rx * py - ry * px


def momentum_exchange_force(field: LatticeField, links: BoundaryLinks, returned, outgoing,
                            particles=(), n_bodies: int | None = None):
    """Galilean-invariant momentum exchange, summed per owner.

    Returns ``(forces, torques, wall_force)`` in lattice units; torques are
    taken about each particle's position (converted to lattice length).
    """
    spec = field.spec
    nb = len(particles) if n_bodies is None else n_bodies
    forces = np.zeros((nb, 3))
    torques = np.zeros((nb, 3))
    wall_force = np.zeros(3)
    if len(links) == 0:
        return forces, torques, wall_force
    centers = np.array([p.position for p in particles], float).reshape(-1, 3)
    _mem(links.direction, links.wall_velocity, links.owner, links.wall_point,
         np.asarray(returned, float), np.asarray(outgoing, float), spec.e3f, centers,
         float(spec.dx), forces, torques, wall_force)
    return forces, torques, wall_force


def collide_stream(field: LatticeField, cfg: FluidConfig, links: BoundaryLinks | None = None):
    """BGK collision, interpolated bounce-back and streaming.

    Returns the (returned, outgoing) link populations for momentum exchange.
    """
    links = BoundaryLinks.concat([field.wall_links, field.links]) if links is None else links
    collide(field, cfg)
    returned, outgoing = apply_ibb(field, links, cfg)
    stream(field)
    if len(links):
        field.f[links.node, field.spec.opp[links.direction]] = returned
    field.update_moments()
    r = field.rho[field.node_class == FLUID]
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        bad = np.nonzero((field.node_class == FLUID) & ((field.rho <= 0) | ~np.isfinite(field.rho)))[0]
        cell = field.index[bad[0]] if len(bad) else None
        raise LatticeError(f"non-physical distribution (first bad cell {cell})")
    return links, returned, outgoing


def particle_level(shape: geo.Metaball) -> float:
    return geo.hydrodynamic_level(shape)


def classify_nodes(field: LatticeField, particles, levels=None) -> LatticeField:
    """Mark solid nodes and build particle boundary links with wall fractions.

    ``particles`` are :class:`~midelbm.dem.ParticleState`; ``levels`` are the
    per-particle hydrodynamic levels c_0 (computed when omitted).
    """
    spec = field.spec
    d = spec.dim
    field.prev_class = field.node_class.copy()
    prev_owner = field.owner.copy()
    field.node_class[field.node_class == SOLID] = FLUID
    field.owner[:] = -1
    if levels is None:
        levels = [particle_level(p.shape) for p in particles]
    regions = []
    for k, p in enumerate(particles):
        box = p.world_box()
        lo_i = np.floor(box.lo[:d] / spec.dx - 1.5).astype(int)
        hi_i = np.ceil(box.hi[:d] / spec.dx + 1.5).astype(int)
        for a in range(d):
            if a in field.walls:
                lo_i[a] = max(lo_i[a], 0)
                hi_i[a] = min(hi_i[a], field.shape[a] - 1)
            elif lo_i[a] < 0 or hi_i[a] > field.shape[a] - 1:
                raise LatticeError(f"particle {k} crosses the periodic boundary on axis {a}")
        sl = tuple(slice(lo_i[a], hi_i[a] + 1) for a in range(d))
        nodes = np.arange(field.n).reshape(field.shape)[sl].ravel()
        body = (field.positions[nodes] - p.position) @ p.rotation
        inside = geo.field_values(p.shape, body) >= levels[k]
        free = field.node_class[nodes] == FLUID
        hit = nodes[inside & free]
        wall_hit = nodes[inside & (field.node_class[nodes] == WALL)]
        if len(wall_hit) and not field.walls:
            raise LatticeError(f"particle {k} overlaps the domain boundary")
        field.node_class[hit] = SOLID
        field.owner[hit] = k
        regions.append(nodes)

    parts = []
    for k, (p, nodes) in enumerate(zip(particles, regions)):
        cand = nodes[field.node_class[nodes] == FLUID]
        R = p.rotation
        for io, e in enumerate(spec.e):
            if not e.any():
                continue
            target = field.nbr[cand, spec.opp[io]]
            sel = cand[(field.node_class[target] == SOLID) & (field.owner[target] == k)]
            if len(sel) == 0:
                continue
            step = spec.e3[io] * spec.dx
            origin_b = (field.positions[sel] - p.position) @ R
            dir_b = np.broadcast_to(step @ R, origin_b.shape)
            q = geo.ray_surface_parameters(p.shape, origin_b, dir_b, levels[k], 1.0)
            q = np.where(np.isnan(q), 0.5, q)
            q = np.clip(q, 1e-12, 1.0)
            xw = field.positions[sel] + q[:, None] * step
            uw = (p.velocity + np.cross(p.angular_velocity, xw - p.position)) * spec.dt / spec.dx
            parts.append(BoundaryLinks(sel, np.full(len(sel), io), q, xw, uw,
                                       np.full(len(sel), k), field.nbr[sel, io]))
    field.links = BoundaryLinks.concat(parts)
    fresh = (field.prev_class == SOLID) & (field.node_class == FLUID)
    field.fresh_nodes = np.nonzero(fresh)[0]
    field._fresh_owner = prev_owner[field.fresh_nodes]
    # solid nodes hold the local rigid-body equilibrium
    solid = np.nonzero(field.node_class == SOLID)[0]
    if len(solid):
        own = field.owner[solid]
        us = np.zeros((len(solid), 3))
        for k, p in enumerate(particles):
            s = own == k
            us[s] = (p.velocity + np.cross(p.angular_velocity, field.positions[solid[s]] - p.position)) \
                * spec.dt / spec.dx
        field.rho[solid] = field.rho0
        field.u[solid] = us
        field.f[solid] = equilibrium(spec, field.rho[solid], us)
    return field


def refill(field: LatticeField, fresh_nodes, particles) -> LatticeField:
    """Initialise populations at nodes uncovered by a moving particle.

    A population whose streaming source was fluid last step is kept.
    Otherwise the opposite population is bounced with the wall-velocity
    correction; if that one is missing too, the equilibrium at the
    particle's local velocity is used.
    """
    spec = field.spec
    fresh = np.asarray(fresh_nodes, dtype=np.int64)
    if len(fresh) == 0:
        return field
    owners = getattr(field, "_fresh_owner", np.full(len(fresh), -1))
    u_new = np.zeros((len(fresh), 3))
    for k, p in enumerate(particles):
        s = owners == k
        u_new[s] = (p.velocity + np.cross(p.angular_velocity, field.positions[fresh[s]] - p.position)) \
            * spec.dt / spec.dx
    feq = equilibrium(spec, np.full(len(fresh), field.rho0), u_new)
    was_fluid = field.prev_class == FLUID
    old = field.f[fresh].copy()
    new = old.copy()
    for i in range(spec.q):
        io = spec.opp[i]
        valid_i = was_fluid[field.nbr[fresh, i]]
        valid_o = was_fluid[field.nbr[fresh, io]] & spec.e[i].any()
        bounce = old[:, io] + 6.0 * spec.w[io] * field.rho0 * (u_new @ spec.e3[i])
        new[:, i] = np.where(valid_i, old[:, i], np.where(valid_o, bounce, feq[:, i]))
    rho = new.sum(axis=1)
    if np.any(rho <= 0) or not np.all(np.isfinite(new)):
        bad = fresh[np.argmin(rho)]
        raise LatticeError(f"refilling produced a non-positive density at cell {field.index[bad]}")
    field.f[fresh] = new
    field.rho[fresh] = rho
    # same half-force shift as the regular moment update
    field.u[fresh] = (new @ spec.e3f + 0.5 * rho[:, None] * field._acc) / rho[:, None]
    return field


def interpolate_velocity(field: LatticeField, x) -> np.ndarray:
    """Multilinear interpolation of the node velocity at physical point(s)."""
    spec = field.spec
    d = spec.dim
    x = np.atleast_2d(np.asarray(x, float))
    offset = np.array([-0.5 if a in field.walls else 0.5 for a in range(d)])
    s = x[:, :d] / spec.dx - offset
    i0 = np.floor(s).astype(int)
    t = s - i0
    U = field.grid(field.u)
    out = np.zeros((len(x), 3))
    for corner in np.ndindex(*(2,) * d):
        c = np.array(corner)
        w = np.prod(np.where(c == 1, t, 1 - t), axis=1)
        idx = tuple((i0[:, a] + c[a]) % field.shape[a] for a in range(d))
        out += w[:, None] * U[idx]
    return out * spec.dx / spec.dt
