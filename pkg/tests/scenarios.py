"""Scenario builders shared by the engine tests and the acceptance gate."""
import numpy as np

from midelbm import dem, engine, geometry as geo, lbm


def diffusive_dt(dx, nu, tau):
    return (tau - 0.5) / 3 * dx * dx / nu


def desk_disc(cells=(64, 96), d_cells=16, rho_p=1100.0, nu=1e-4, tau=0.8, substeps=10,
              dx=5e-4, height=0.75, gravity=-9.81, steps=0, prescribed_velocity=None, **kw):
    """2D disc settling between side walls, top and bottom closed."""
    dt = diffusive_dt(dx, nu, tau)
    r = 0.5 * d_cells * dx
    pos = (0.5 * cells[0] * dx + 0.1 * dx, height * cells[1] * dx, 0.0)
    pc = engine.ParticleConfig(geo.Metaball.sphere(r), rho_p, position=pos)
    if prescribed_velocity is not None:
        pc.velocity = (0.0, prescribed_velocity, 0.0)
        pc.prescribed = True
    return engine.SimulationConfig(
        domain=(cells[0] * dx, cells[1] * dx, 0.0), lattice="D2Q9", dx=dx, dt_lbm=dt,
        dt_dem=dt / substeps, fluid=lbm.FluidConfig(1000.0, nu, "kinematic"), particles=[pc],
        walls=("x", "y"), gravity=(0.0, gravity, 0.0), steps=steps,
        contact=dem.ContactParams(kn=1.0, kt=0.5), **kw)


def settling_sphere(d_cells=20, box=(3, 3, 6), rho_p=1100.0, nu=1e-3, tau=1.1, substeps=10,
                    dx=1e-3, height=0.8, prescribed_velocity=None, steps=0, **kw):
    """3D sphere released in a closed box measured in diameters."""
    cells = tuple(int(b * d_cells) for b in box)
    dt = diffusive_dt(dx, nu, tau)
    r = 0.5 * d_cells * dx
    pos = (0.5 * cells[0] * dx, 0.5 * cells[1] * dx, height * cells[2] * dx)
    pc = engine.ParticleConfig(geo.Metaball.sphere(r), rho_p, position=pos)
    if prescribed_velocity is not None:
        pc.velocity = (0.0, 0.0, prescribed_velocity)
        pc.prescribed = True
    return engine.SimulationConfig(
        domain=tuple(c * dx for c in cells), lattice="D3Q15", dx=dx, dt_lbm=dt, dt_dem=dt / substeps,
        fluid=lbm.FluidConfig(1000.0, nu, "kinematic"), particles=[pc], gravity=(0.0, 0.0, -9.81),
        steps=steps, contact=dem.ContactParams(kn=10.0, kt=5.0), **kw)


def vertical_speed(sim, pid=0, axis=None):
    axis = sim.cfg.dim - 1 if axis is None else axis
    return -sim.series("velocity", pid)[:, axis]


def plateau(v, frac=0.2):
    """Mean of the last ``frac`` of a series and its relative spread there."""
    tail = np.asarray(v)[-max(2, int(len(v) * frac)):]
    return float(tail.mean()), float(np.ptp(tail) / abs(tail.mean()))
