"""DEM-LBM coupling and scenario driver."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dem, geometry as geo, lbm

log = logging.getLogger(__name__)

AXES = "xyz"


class ConfigError(ValueError):
    """Invalid scenario configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class StepError(RuntimeError):
    def __init__(self, step: int, particle, cause: Exception):
        who = "" if particle is None else f", particle {particle}"
        super().__init__(f"step {step}{who}: {cause}")
        self.step = step
        self.particle = particle
        self.__cause__ = cause


@dataclass
class ParticleConfig:
    shape: geo.Metaball
    density: float
    position: tuple = (0.0, 0.0, 0.0)
    orientation: tuple = (1.0, 0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0)
    angular_velocity: tuple = (0.0, 0.0, 0.0)
    prescribed: bool = False
    source: str | None = None


@dataclass
class SimulationConfig:
    """Everything needed to build a coupled run (SI units throughout).

    ``walls`` lists the axes closed by static walls; ``wall_velocity``
    optionally maps an axis to (low, high) wall velocities for the fluid.
    """

    domain: tuple
    lattice: str = "D3Q15"
    dx: float = 1e-3
    dt_lbm: float = 2e-4
    dt_dem: float = 2e-6
    fluid: lbm.FluidConfig = field(default_factory=lbm.FluidConfig)
    particles: list = field(default_factory=list)
    walls: tuple = ("x", "y", "z")
    wall_velocity: dict = field(default_factory=dict)
    gravity: tuple = (0.0, 0.0, -9.81)
    contact: dem.ContactParams = field(default_factory=dem.ContactParams)
    record_every: int = 1
    snapshot_every: int = 0
    steps: int = 100
    seed: int = 0
    mass_resolution: int = 64
    vtk_binary: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def dim(self) -> int:
        return 2 if self.lattice == "D2Q9" else 3

    @property
    def substeps(self) -> int:
        return int(round(self.dt_lbm / self.dt_dem))

    def cells(self) -> tuple:
        return tuple(int(round(self.domain[a] / self.dx)) for a in range(self.dim))

    def validate(self):
        if self.lattice not in ("D2Q9", "D3Q15"):
            raise ConfigError("lattice", f"unknown lattice {self.lattice!r}")
        if len(self.domain) < self.dim:
            raise ConfigError("domain", f"needs {self.dim} extents")
        for a in range(self.dim):
            if self.domain[a] <= 0:
                raise ConfigError(f"domain[{a}]", "extent must be positive")
            n = self.domain[a] / self.dx
            if abs(n - round(n)) > 1e-6 * max(1.0, n) or round(n) < 3:
                raise ConfigError(f"domain[{a}]", "extent must be a multiple (>= 3) of dx")
        if self.dx <= 0 or self.dt_lbm <= 0 or self.dt_dem <= 0:
            raise ConfigError("dx", "dx, dt_lbm and dt_dem must be positive")
        ratio = self.dt_lbm / self.dt_dem
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            raise ConfigError("dt_dem", f"dt_lbm/dt_dem = {ratio:g} is not a positive integer")
        for w in self.walls:
            if w not in AXES[: self.dim]:
                raise ConfigError("walls", f"unknown axis {w!r}")
        if self.record_every < 1:
            raise ConfigError("record_every", "must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        try:
            self.fluid.tau(lbm.LatticeSpec(self.lattice, self.dx, self.dt_lbm))
        except ValueError as exc:
            raise ConfigError("fluid.viscosity", str(exc)) from None
        for i, p in enumerate(self.particles):
            if p.density <= 0:
                raise ConfigError(f"particles[{i}].density", "must be positive")
            pos = np.asarray(p.position, float)
            R = geo.rotation_matrix(np.asarray(p.orientation, float) / np.linalg.norm(p.orientation))
            box = geo.bounding_box(p.shape)
            corners = dem._corners(box) - centroid_guess(p.shape)
            w = corners @ R.T + pos
            for a in range(self.dim):
                if w[:, a].min() < 0 or w[:, a].max() > self.domain[a]:
                    raise ConfigError(f"particles[{i}].position",
                                      "initial bounding box leaves the domain")


def centroid_guess(mb: geo.Metaball) -> np.ndarray:
    pos = mb.weights > 0
    c = mb.centers[pos] if pos.any() else mb.centers
    w = mb.weights[pos] if pos.any() else np.ones(len(c))
    return (c * w[:, None]).sum(axis=0) / w.sum()


@dataclass
class TimeSeriesRecord:
    step: int
    time: float
    position: np.ndarray
    velocity: np.ndarray
    angular_velocity: np.ndarray
    hydro_force: np.ndarray
    hydro_torque: np.ndarray
    contacts: int


CSV_COLUMNS = ("step", "time", "pid", "x", "y", "z", "vx", "vy", "vz", "wx", "wy", "wz",
               "fx", "fy", "fz", "tx", "ty", "tz", "contacts")
CSV_VERSION = 1
AUDIT_ITEMS = ("fluid_change", "mem_particles", "mem_walls", "galilean", "covered", "refilled", "body")
MACH_WARN = 0.1  # lattice units; c_s = 0.577


def planar_mass_properties(mb: geo.Metaball, density: float, thickness: float, resolution: int = 256):
    """Mass properties of the z = 0 cross-section extruded by ``thickness``."""
    box = geo.bounding_box(mb)
    h = (box.hi[:2] - box.lo[:2]) / resolution
    ax = [box.lo[a] + (np.arange(resolution) + 0.5) * h[a] for a in range(2)]
    X, Y = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([X, Y, np.zeros_like(X)], axis=-1)
    mask = geo.field_values(mb, pts) >= mb.surface_level
    if not mask.any():
        raise geo.EmptyLevelSetError("empty cross-section")
    da = h[0] * h[1]
    area = mask.sum() * da
    xy = pts[mask][:, :2]
    c = xy.mean(axis=0)
    r = xy - c
    ixx = (r[:, 1] ** 2).sum() * da
    iyy = (r[:, 0] ** 2).sum() * da
    izz = ixx + iyy
    m = density * area * thickness
    inertia = density * thickness * np.diag([ixx, iyy, izz])
    return geo.MassProperties(area * thickness, m, np.array([c[0], c[1], 0.0]), inertia)


class Simulation:
    """Coupled run: one LBM macro-step followed by DEM sub-steps."""

    def __init__(self, cfg: SimulationConfig, audit: bool = False):
        self.cfg = cfg
        self.spec = lbm.LatticeSpec(cfg.lattice, cfg.dx, cfg.dt_lbm)
        walls = {}
        for w in cfg.walls:
            a = AXES.index(w)
            vlo, vhi = cfg.wall_velocity.get(w, ((0, 0, 0), (0, 0, 0)))
            walls[a] = (vlo, vhi)
        self.field = lbm.LatticeField(self.spec, cfg.cells(), walls, 1.0)
        self.particles: list[dem.ParticleState] = []
        self.levels = []
        self.volumes = []
        self.densities = []
        for i, pc in enumerate(cfg.particles):
            shape = pc.shape
            if cfg.dim == 2:
                mp = planar_mass_properties(shape.dilated() if shape.sphero_radius else shape,
                                            pc.density, cfg.dx)
            else:
                mp = geo.mass_properties(shape, pc.density, cfg.mass_resolution,
                                         dilate=shape.sphero_radius > 0)
            body = shape.translated(-mp.centroid)
            p = dem.ParticleState(body, mp.mass, mp.inertia_tensor, position=pc.position,
                                  orientation=pc.orientation, velocity=pc.velocity,
                                  angular_velocity=pc.angular_velocity, pid=i,
                                  prescribed=pc.prescribed)
            self.particles.append(p)
            self.levels.append(lbm.particle_level(body))
            self.volumes.append(mp.volume)
            self.densities.append(pc.density)
        dem_walls = []
        for w in cfg.walls:
            a = AXES.index(w)
            n = np.zeros(3)
            n[a] = 1.0
            dem_walls.append(dem.WallPlane(np.zeros(3), n))
            hi = np.zeros(3)
            hi[a] = cfg.domain[a]
            dem_walls.append(dem.WallPlane(hi, -n))
        self.world = dem.DemWorld(self.particles, dem_walls, cfg.contact, planar=cfg.dim == 2)
        if self.particles and not all(p.prescribed for p in self.particles):
            self.world.check_timestep(cfg.dt_dem)
        self.step_index = 0
        self.time = 0.0
        self.hydro_force = np.zeros((len(self.particles), 3))
        self.hydro_torque = np.zeros((len(self.particles), 3))
        self.wall_force = np.zeros(3)
        self.records: list[TimeSeriesRecord] = []
        self.timing = {"lbm": 0.0, "dem": 0.0, "io": 0.0}
        self.refilled = 0
        self._mach_warned = False
        # lattice-unit momentum ledger of the fluid, itemised per source
        self.audit = {k: np.zeros(3) for k in AUDIT_ITEMS} if audit else None
        self._force_scale = cfg.fluid.density * cfg.dx ** 4 / cfg.dt_lbm ** 2
        self.gravity = np.zeros(3)
        self.gravity[: cfg.dim] = np.asarray(cfg.gravity, float)[: cfg.dim]
        self.field._acc = cfg.fluid.accel_lattice(self.spec)
        self.field.update_moments()
        lbm.classify_nodes(self.field, self.particles, self.levels)
        self.field.prev_class = self.field.node_class.copy()
        self.field.fresh_nodes = np.zeros(0, dtype=np.int64)

    def buoyancy(self) -> list[np.ndarray]:
        rho_f = self.cfg.fluid.density
        return [-p.mass * (rho_f / rho_p) * self.gravity for p, rho_p in zip(self.particles, self.densities)]

    def lbm_step(self):
        fld = self.field
        e = self.spec.e3f
        if self.audit is not None:
            was_fluid = fld.fluid_mask()
            mom = fld.f @ e
            p_before = mom[was_fluid].sum(axis=0)
        lbm.classify_nodes(fld, self.particles, self.levels)
        if len(fld.fresh_nodes):
            lbm.refill(fld, fld.fresh_nodes, self.particles)
            self.refilled += len(fld.fresh_nodes)
        if self.audit is not None:
            a = self.audit
            covered = was_fluid & (fld.node_class == lbm.SOLID)
            a["covered"] += mom[covered].sum(axis=0)
            a["refilled"] += (fld.f[fld.fresh_nodes] @ e).sum(axis=0)
            a["body"] += self.cfg.fluid.accel_lattice(self.spec) * fld.rho[fld.fluid_mask()].sum()
        links, returned, outgoing = lbm.collide_stream(fld, self.cfg.fluid)
        f, t, wf = lbm.momentum_exchange_force(fld, links, returned, outgoing, self.particles)
        if self.audit is not None:
            raw = ((outgoing + returned)[:, None] * e[links.direction]).sum(axis=0)
            a["mem_particles"] += f.sum(axis=0)
            a["mem_walls"] += wf
            a["galilean"] += f.sum(axis=0) + wf - raw
            a["fluid_change"] += (fld.f[fld.fluid_mask()] @ e).sum(axis=0) - p_before
        self.hydro_force = f * self._force_scale
        self.hydro_torque = t * self._force_scale * self.cfg.dx
        self.wall_force = wf * self._force_scale
        u_max = float(np.abs(fld.u[fld.fluid_mask()]).max(initial=0.0))
        if u_max > MACH_WARN and not self._mach_warned:
            log.warning("lattice velocity %.3f exceeds %.2f at step %d; compressibility error grows",
                        u_max, MACH_WARN, self.step_index)
            self._mach_warned = True

    def audit_residual(self) -> np.ndarray:
        """Fluid momentum change minus its itemised sources (lattice units).

        Zero up to rounding when every transfer is accounted for: MEM
        impulse on particles and walls (with its Galilean correction
        added back), momentum removed at covered nodes, momentum added
        by refilling, and the fluid body force.
        """
        a = self.audit
        if a is None:
            raise RuntimeError("simulation was created without audit=True")
        return a["fluid_change"] - (-(a["mem_particles"] + a["mem_walls"]) + a["galilean"]
                                    - a["covered"] + a["refilled"] + a["body"])

    def dem_steps(self):
        cfg = self.cfg
        ext = [(fh + fb, th) for fh, fb, th in zip(self.hydro_force, self.buoyancy(), self.hydro_torque)]
        self.world._forces_ready = False
        for _ in range(cfg.substeps):
            self.world.step(cfg.dt_dem, self.gravity, ext)

    def step(self):
        t0 = time.perf_counter()
        try:
            self.lbm_step()
        except Exception as exc:
            raise StepError(self.step_index, None, exc) from exc
        t1 = time.perf_counter()
        try:
            self.dem_steps()
        except dem.DeepPenetrationError as exc:
            raise StepError(self.step_index, None, exc) from exc
        t2 = time.perf_counter()
        self.timing["lbm"] += t1 - t0
        self.timing["dem"] += t2 - t1
        self.step_index += 1
        self.time = self.step_index * self.cfg.dt_lbm
        if self.step_index % self.cfg.record_every == 0:
            self.records.append(self.snapshot())

    def snapshot(self) -> TimeSeriesRecord:
        ps = self.particles
        return TimeSeriesRecord(
            self.step_index, self.time,
            np.array([p.position for p in ps]).reshape(-1, 3),
            np.array([p.velocity for p in ps]).reshape(-1, 3),
            np.array([p.angular_velocity for p in ps]).reshape(-1, 3),
            self.hydro_force.copy(), self.hydro_torque.copy(), self.world.contact_count)

    def run(self, steps: int | None = None, out_dir: str | Path | None = None, callback=None):
        from . import io as mio

        steps = self.cfg.steps if steps is None else steps
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        if not self.records:
            self.records.append(self.snapshot())
        for _ in range(steps):
            self.step()
            if callback is not None:
                callback(self)
            if out is not None and self.cfg.snapshot_every and self.step_index % self.cfg.snapshot_every == 0:
                t = time.perf_counter()
                mio.write_vtk(out / f"fields_{self.step_index}.vtk", self.field, self.cfg.vtk_binary,
                              self.cfg.fluid.density)
                self.timing["io"] += time.perf_counter() - t
        if out is not None:
            mio.write_series_csv(out / "particles.csv", self.records)
        return self.records

    # convenience views
    def series(self, attr: str, pid: int = 0) -> np.ndarray:
        return np.array([getattr(r, attr)[pid] for r in self.records])

    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])
