"""Rigid-body DEM for sphero-Metaball particles.

Contact normals follow one convention throughout: ``ContactInfo.normal``
points toward the body that receives the returned force (the first body of
a pair, or the particle in a particle-wall contact).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import Metaball

log = logging.getLogger(__name__)

C_TOL = 1e-6
NEWTON_MAX_ITER = 50
NEWTON_RTOL = 1e-10


class DeepPenetrationError(RuntimeError):
    """Core Metaballs interpenetrate; the sphero contact model is invalid."""


class StabilityError(ValueError):
    pass


# --- state -----------------------------------------------------------------

def quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_exp(rotvec) -> np.ndarray:
    """Unit quaternion of the rotation vector ``rotvec`` (axis * angle)."""
    theta = float(np.linalg.norm(rotvec))
    if theta < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * theta
    return np.concatenate([[np.cos(half)], np.sin(half) * np.asarray(rotvec) / theta])


@dataclass
class ParticleState:
    shape: Metaball
    mass: float
    inertia: np.ndarray
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pid: int = 0
    # prescribed bodies keep their velocities; forces are still recorded
    prescribed: bool = False

    def __post_init__(self):
        for name in ("position", "orientation", "velocity", "angular_velocity", "force", "torque"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        self.inertia = np.array(self.inertia, dtype=float)
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if not np.allclose(self.inertia, self.inertia.T) or np.any(np.linalg.eigvalsh(self.inertia) <= 0):
            raise ValueError("inertia must be symmetric positive definite")
        self.orientation = self.orientation / np.linalg.norm(self.orientation)

    @property
    def rotation(self) -> np.ndarray:
        return geo.rotation_matrix(self.orientation)

    @property
    def sphero_radius(self) -> float:
        return self.shape.sphero_radius

    def world_inertia(self) -> np.ndarray:
        R = self.rotation
        return R @ self.inertia @ R.T

    @property
    def angular_momentum(self) -> np.ndarray:
        return self.world_inertia() @ self.angular_velocity

    def velocity_at(self, x) -> np.ndarray:
        return self.velocity + np.cross(self.angular_velocity, np.asarray(x) - self.position)

    def to_body(self, x) -> np.ndarray:
        return (np.asarray(x) - self.position) @ self.rotation

    # world-frame Metaball evaluation
    def f(self, x) -> float:
        return geo.evaluate(self.shape, self.to_body(x))

    def grad(self, x) -> np.ndarray:
        return self.rotation @ geo.gradient(self.shape, self.to_body(x))

    def fgh(self, x):
        R = self.rotation
        f, g, h = geo.value_grad_hess(self.shape, self.to_body(x))
        return f, R @ g, R @ h @ R.T

    def world_box(self, margin: float = 0.0) -> geo.Box:
        key = (self.position.tobytes(), self.orientation.tobytes(), margin)
        cached = getattr(self, "_box_cache", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        w = _corners(geo.bounding_box(self.shape, margin)) @ self.rotation.T + self.position
        box = geo.Box(w.min(axis=0), w.max(axis=0))
        self._box_cache = (key, box)
        return box

    def kinetic_energy(self) -> float:
        return 0.5 * self.mass * float(self.velocity @ self.velocity) + \
            0.5 * float(self.angular_velocity @ self.angular_momentum)


def _corners(box: geo.Box) -> np.ndarray:
    lo, hi = box.lo, box.hi
    return np.array([[(lo, hi)[i][0], (lo, hi)[j][1], (lo, hi)[k][2]]
                     for i in (0, 1) for j in (0, 1) for k in (0, 1)])


@dataclass
class ContactParams:
    kn: float = 1e5
    kt: float = 5e4
    eta_n: float = 0.0
    eta_t: float = 0.0
    mu_s: float = 0.5

    def __post_init__(self):
        if self.kn <= 0 or self.kt < 0:
            raise ValueError("kn must be positive and kt non-negative")
        if self.eta_n < 0 or self.eta_t < 0 or self.mu_s < 0:
            raise ValueError("damping and friction must be non-negative")

    @staticmethod
    def damping_for_restitution(e: float, kn: float, m_eff: float) -> float:
        """Normal damping giving restitution ``e`` for the linear spring-dashpot."""
        if not 0 < e <= 1:
            raise ValueError("restitution must lie in (0, 1]")
        ln = np.log(e)
        return -2.0 * ln * np.sqrt(kn * m_eff / (ln * ln + np.pi * np.pi))


@dataclass
class ContactInfo:
    point: np.ndarray
    normal: np.ndarray
    overlap: float
    tangential_spring: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class WallPlane:
    point: np.ndarray
    outward_normal: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        n = np.asarray(self.outward_normal, dtype=float)
        self.outward_normal = n / np.linalg.norm(n)

    def signed_distance(self, x) -> float:
        return float((np.asarray(x) - self.point) @ self.outward_normal)


@dataclass
class ClosestPoints:
    x_c0: np.ndarray
    x_c1: np.ndarray
    x_m: np.ndarray
    iterations: int


# --- narrow phase ----------------------------------------------------------

def _boxes_overlap(a: geo.Box, b: geo.Box) -> bool:
    return bool(np.all(a.lo <= b.hi) and np.all(b.lo <= a.hi))


def _project_to_surface(p: ParticleState, x_m: np.ndarray, level: float = 1.0) -> np.ndarray:
    """Nearest crossing of the level set along the gradient line through ``x_m``.

    Starts from the first-order step q = (1 - f)/|grad f|^2 and iterates
    Newton along that fixed line (inward when f < level, outward when f >
    level).  Near a ball f is convex along the line, so the iterates stay
    on the starting side; an overshoot is bracketed and bisected.
    """
    f = p.f(x_m)
    sgn = 1.0 if f < level else -1.0
    u = p.grad(x_m)
    u = sgn * u / np.linalg.norm(u)
    s = 0.0
    for _ in range(NEWTON_MAX_ITER):
        if abs(level - f) <= 1e-13 * level:
            return x_m + s * u
        slope = float(p.grad(x_m + s * u) @ u)
        if slope * sgn <= 0:
            break
        step = (level - f) / slope
        f_new = p.f(x_m + (s + step) * u)
        if (f_new - level) * sgn >= 0:
            lo, hi = s, s + step
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if (p.f(x_m + mid * u) - level) * sgn >= 0:
                    hi = mid
                else:
                    lo = mid
                if hi - lo <= 1e-15 * max(1.0, abs(hi)):
                    break
            return x_m + hi * u
        s, f = s + step, f_new
    if sgn > 0:
        R = p.rotation
        box = p.world_box()
        reach = float(np.linalg.norm(box.hi - box.lo)) + float(np.linalg.norm(x_m - p.position))
        t = geo.ray_surface_parameters(p.shape, p.to_body(x_m)[None], (R.T @ u)[None] * reach, level,
                                       1.0, samples=4096)[0]
        if not np.isnan(t):
            return x_m + t * reach * u
    raise DeepPenetrationError(f"no surface of particle {p.pid} along the gradient line")


def closest_points_pair(a: ParticleState, b: ParticleState, seed=None,
                        margin: float = 0.0) -> ClosestPoints | None:
    """Newton-Raphson on grad(f_a + f_b) = 0, then project to both surfaces.

    Pairs whose world boxes (grown by ``margin``) do not overlap are skipped.
    """
    if not _boxes_overlap(a.world_box(margin), b.world_box(margin)):
        return None
    x = 0.5 * (a.position + b.position) if seed is None else np.array(seed, dtype=float)
    converged = False
    it = 0
    for it in range(1, NEWTON_MAX_ITER + 1):
        fa, ga, ha = a.fgh(x)
        fb, gb, hb = b.fgh(x)
        g = ga + gb
        gnorm = np.linalg.norm(g)
        if gnorm <= NEWTON_RTOL * max(np.linalg.norm(ga), np.linalg.norm(gb)):
            converged = True
            break
        try:
            step = -np.linalg.solve(ha + hb, g)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        for _ in range(30):
            xn = x + lam * step
            try:
                gn = a.grad(xn) + b.grad(xn)
            except geo.SingularEvaluationError:
                lam *= 0.5
                continue
            if np.linalg.norm(gn) < gnorm:
                break
            lam *= 0.5
        x = x + lam * step
    if not converged:
        log.debug("pair %d-%d: Newton did not converge in %d iterations", a.pid, b.pid, it)
        return None
    fa, fb = a.f(x), b.f(x)
    if fa <= C_TOL or fb <= C_TOL:
        return None
    # one core may hold the critical point while the shapes are apart
    if fa >= a.shape.surface_level and fb >= b.shape.surface_level:
        raise DeepPenetrationError(f"cores of particles {a.pid} and {b.pid} interpenetrate")
    return ClosestPoints(_project_to_surface(a, x), _project_to_surface(b, x), x, it)


def contact_pair(a: ParticleState, b: ParticleState, cp: ClosestPoints | None) -> ContactInfo | None:
    """Overlap, normal (toward ``a``) and contact point of the sphero shells."""
    if cp is None:
        return None
    d = cp.x_c0 - cp.x_c1
    dist = float(np.linalg.norm(d))
    if dist < 1e-12:
        raise DeepPenetrationError(f"closest points of {a.pid} and {b.pid} coincide")
    delta = a.sphero_radius + b.sphero_radius - dist
    if delta <= 0:
        return None
    n = d / dist
    x_cp = cp.x_c0 - (a.sphero_radius - 0.5 * delta) * n
    return ContactInfo(x_cp, n, delta)


def contact_wall(a: ParticleState, w: WallPlane) -> ContactInfo | None:
    """Particle-wall contact; the normal is the wall normal (toward the particle)."""
    box = a.world_box()
    corners = _corners(box)
    if ((corners - w.point) @ w.outward_normal).min() > 0:
        return None
    n = w.outward_normal
    t1 = np.cross(n, [1.0, 0.0, 0.0])
    if np.linalg.norm(t1) < 0.5:
        t1 = np.cross(n, [0.0, 1.0, 0.0])
    t1 /= np.linalg.norm(t1)
    T = np.column_stack([t1, np.cross(n, t1)])
    origin = a.position - w.signed_distance(a.position) * n
    u = np.zeros(2)
    converged = False
    for _ in range(NEWTON_MAX_ITER):
        x = origin + T @ u
        f, g, h = a.fgh(x)
        gu = T.T @ g
        gnorm = np.linalg.norm(gu)
        if gnorm <= NEWTON_RTOL * np.linalg.norm(g):
            converged = True
            break
        try:
            step = -np.linalg.solve(T.T @ h @ T, gu)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        for _ in range(30):
            if np.linalg.norm(T.T @ a.grad(origin + T @ (u + lam * step))) < gnorm:
                break
            lam *= 0.5
        u = u + lam * step
    if not converged:
        log.debug("particle %d: wall Newton did not converge", a.pid)
        return None
    x_cw = origin + T @ u
    f = a.f(x_cw)
    if f <= C_TOL:
        return None
    if f >= a.shape.surface_level:
        raise DeepPenetrationError(f"core of particle {a.pid} crosses a wall")
    x_cm = _project_to_surface(a, x_cw)
    delta = a.sphero_radius - w.signed_distance(x_cm)
    if delta <= 0:
        return None
    return ContactInfo(x_cw + 0.5 * delta * n, n.copy(), delta)


def contact_force(info: ContactInfo, a: ParticleState, b: ParticleState | None,
                  p: ContactParams, dt: float):
    """Linear spring-dashpot force on ``a`` and the updated tangential spring.

    ``b`` is None for a static wall.  The torque on a body is
    ``cross(info.point - body.position, force)``, left to the caller.
    """
    n = info.normal
    v_a = a.velocity_at(info.point)
    v_b = np.zeros(3) if b is None else b.velocity_at(info.point)
    v_rel = v_b - v_a
    vn = float(v_rel @ n)
    fn = p.kn * info.overlap + p.eta_n * vn
    fn = max(fn, 0.0)
    v_t = v_rel - vn * n
    xi = np.asarray(info.tangential_spring, dtype=float)
    mag = np.linalg.norm(xi)
    xi = xi - (xi @ n) * n
    new_mag = np.linalg.norm(xi)
    if new_mag > 0:
        xi *= mag / new_mag
    xi = xi + v_t * dt
    ft = p.kt * xi + p.eta_t * v_t
    ft_mag = np.linalg.norm(ft)
    cap = p.mu_s * fn
    if ft_mag > cap:
        ft = ft * (cap / ft_mag) if ft_mag > 0 else ft
        xi = (ft - p.eta_t * v_t) / p.kt
    return fn * n + ft, xi


# --- integration -----------------------------------------------------------

@dataclass
class PairRecord:
    xi: np.ndarray
    seed: np.ndarray | None = None


class DemWorld:
    """Particles, static walls and persistent per-contact state.

    ``planar`` constrains motion to the xy plane (2D runs).
    """

    def __init__(self, particles, walls=(), params: ContactParams | None = None,
                 planar: bool = False):
        self.particles: list[ParticleState] = list(particles)
        self.walls: list[WallPlane] = list(walls)
        self.params = params or ContactParams()
        self.planar = planar
        self.contacts: dict[tuple, PairRecord] = {}
        self.contact_count = 0
        self._forces_ready = False

    def check_timestep(self, dt: float):
        m_min = min(p.mass for p in self.particles)
        limit = 0.1 * np.sqrt(m_min / self.params.kn)
        if dt <= 0 or dt >= limit:
            raise StabilityError(f"DEM time step {dt:g} must lie in (0, {limit:g})")

    def _constrain(self, vec: np.ndarray, kind: str) -> np.ndarray:
        if not self.planar:
            return vec
        out = vec.copy()
        if kind == "linear":
            out[2] = 0.0
        else:
            out[:2] = 0.0
        return out

    def compute_forces(self, gravity, external=None, dt: float = 0.0):
        g = np.asarray(gravity, dtype=float)
        ps = self.particles
        F = [p.mass * g for p in ps]
        T = [np.zeros(3) for _ in ps]
        if external is not None:
            for i, (fe, te) in enumerate(external):
                F[i] = F[i] + fe
                T[i] = T[i] + te
        active = set()
        count = 0
        for i in range(len(ps)):
            for j in range(i + 1, len(ps)):
                key = (i, j)
                rec = self.contacts.get(key)
                cp = closest_points_pair(ps[i], ps[j], None if rec is None else rec.seed)
                if cp is None and rec is not None and rec.seed is not None:
                    cp = closest_points_pair(ps[i], ps[j])
                info = contact_pair(ps[i], ps[j], cp)
                if info is None:
                    continue
                if rec is not None:
                    info.tangential_spring = rec.xi
                f, xi = contact_force(info, ps[i], ps[j], self.params, dt)
                F[i] = F[i] + f
                F[j] = F[j] - f
                T[i] = T[i] + np.cross(info.point - ps[i].position, f)
                T[j] = T[j] - np.cross(info.point - ps[j].position, f)
                self.contacts[key] = PairRecord(xi, cp.x_m)
                active.add(key)
                count += 1
            for k, w in enumerate(self.walls):
                key = (i, "wall", k)
                info = contact_wall(ps[i], w)
                if info is None:
                    continue
                rec = self.contacts.get(key)
                if rec is not None:
                    info.tangential_spring = rec.xi
                f, xi = contact_force(info, ps[i], None, self.params, dt)
                F[i] = F[i] + f
                T[i] = T[i] + np.cross(info.point - ps[i].position, f)
                self.contacts[key] = PairRecord(xi)
                active.add(key)
                count += 1
        for key in list(self.contacts):
            if key not in active:
                del self.contacts[key]
        self.contact_count = count
        for p, f, t in zip(ps, F, T):
            p.force = self._constrain(f, "linear")
            p.torque = self._constrain(t, "angular")
        self._forces_ready = True

    def step(self, dt: float, gravity, external=None):
        """Velocity Verlet for translation; angular momentum form for rotation."""
        if not self._forces_ready:
            self.compute_forces(gravity, external, dt)
        half = []
        for p in self.particles:
            L = p.angular_momentum
            if p.prescribed:
                v_half, L_half = p.velocity, L
            else:
                v_half = p.velocity + 0.5 * dt * p.force / p.mass
                L_half = L + 0.5 * dt * p.torque
            p.position = p.position + dt * v_half
            w0 = self._omega(p, p.orientation, L_half)
            q_mid = quat_mul(quat_exp(0.5 * dt * w0), p.orientation)
            w_mid = self._omega(p, q_mid / np.linalg.norm(q_mid), L_half)
            q = quat_mul(quat_exp(dt * w_mid), p.orientation)
            p.orientation = q / np.linalg.norm(q)
            p.velocity = v_half
            p.angular_velocity = self._omega(p, p.orientation, L_half)
            half.append(L_half)
        self.compute_forces(gravity, external, dt)
        for p, L_half in zip(self.particles, half):
            if p.prescribed:
                continue
            p.velocity = self._constrain(p.velocity + 0.5 * dt * p.force / p.mass, "linear")
            L = L_half + 0.5 * dt * p.torque
            p.angular_velocity = self._constrain(self._omega(p, p.orientation, L), "angular")

    @staticmethod
    def _omega(p: ParticleState, q, L) -> np.ndarray:
        R = geo.rotation_matrix(q)
        return R @ np.linalg.solve(p.inertia, R.T @ L)

    def momentum(self) -> np.ndarray:
        return sum(p.mass * p.velocity for p in self.particles)


def integrate(world: DemWorld, gravity, external, params: ContactParams, dt: float) -> DemWorld:
    """One DEM step of ``world`` (updated in place and returned)."""
    world.params = params
    world.step(dt, gravity, external)
    return world
