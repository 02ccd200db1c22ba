import numpy as np
import pytest

from midelbm import engine, geometry as geo, metrics


def record(t, pos, vel=None, omega=None):
    pos = np.asarray(pos, float)
    z = np.zeros_like(pos)
    return engine.TimeSeriesRecord(int(round(t * 100)), t, pos, z if vel is None else np.asarray(vel, float),
                                   z if omega is None else np.asarray(omega, float), z, z, 0)


def two_ball(s, r=1.0):
    """Two equal balls separated along x by ``s`` times their radius."""
    c = np.array([[-0.5 * s * r, 0, 0], [0.5 * s * r, 0, 0]])
    return geo.Metaball(c, np.full(2, r * r), 0.0)


def flat_two_ball(s):
    """Two balls side by side plus a thin spread: longer in x and y than in z."""
    c = np.array([[-s, -s, 0], [s, -s, 0], [-s, s, 0], [s, s, 0]]) * 0.5
    return geo.Metaball(c, np.full(4, 0.3), 0.0)


def test_reynolds_direct_substitution():
    recs = [record(0.0, [[0, 0, 0]]), record(0.1, [[0, 0, 0]], vel=[[0, 0, -0.1]]),
            record(0.2, [[0, 0, 0]], vel=[[0, 0.06, -0.08]])]
    assert metrics.reynolds(recs, 1000.0, 0.1, 0.01) == pytest.approx(10.0, rel=1e-12)


def test_reynolds_at_rest_is_zero():
    assert metrics.reynolds([record(0.0, [[0, 0, 0]])], 1000.0, 0.1, 0.01) == 0.0


def test_reynolds_errors():
    with pytest.raises(ValueError):
        metrics.reynolds([record(0.0, [[0, 0, 0]])], 1000.0, 0.0, 0.01)
    with pytest.raises(ValueError):
        metrics.reynolds([], 1000.0, 0.1, 0.01)


def test_equivalent_diameter():
    assert metrics.equivalent_diameter(np.pi / 6) == pytest.approx(1.0)


def test_schiller_naumann_limits():
    assert metrics.schiller_naumann(0.0) == 1.0
    assert metrics.schiller_naumann(1.0) == pytest.approx(1.15)


def test_sphere_descriptors():
    d = metrics.shape_descriptors(geo.Metaball.sphere(1.0), 128)
    assert d.sphericity == pytest.approx(1.0, abs=0.02)
    assert d.dn_over_ds == pytest.approx(1.0, abs=0.02)
    assert d.csf == pytest.approx(1.0, abs=0.02)
    assert d.d_n == pytest.approx(2.0, rel=1e-2)
    assert 0 < d.sphericity <= 1.0 + 0.02


def test_sphero_sphere_descriptors_use_dilated_shape():
    d = metrics.shape_descriptors(geo.Metaball.sphere(0.8, sphero_radius=0.2), 96)
    assert d.d_n == pytest.approx(2.0, rel=1e-2)
    assert d.csf == pytest.approx(1.0, abs=0.02)


def test_flattened_shape_csf_below_one_and_monotone():
    csf = [metrics.shape_descriptors(flat_two_ball(s), 96).csf for s in (0.3, 0.6, 0.9, 1.2)]
    assert all(c < 1 for c in csf)
    assert all(a > b for a, b in zip(csf, csf[1:]))


def test_elongated_two_ball_descriptors():
    d = metrics.shape_descriptors(two_ball(1.0), 96)
    e = d.extents
    assert e[0] <= e[1] <= e[2]
    assert d.csf < 1
    assert d.sphericity < 1


def test_descriptor_resolution_convergence():
    mb = two_ball(0.8)
    a = metrics.shape_descriptors(mb, 64)
    b = metrics.shape_descriptors(mb, 128)
    assert abs(a.sphericity - b.sphericity) < 0.01 * b.sphericity


def test_descriptors_are_pure():
    mb = flat_two_ball(0.7)
    assert metrics.shape_descriptors(mb, 64) == metrics.shape_descriptors(mb, 64)


def test_descriptor_row_format():
    row = metrics.shape_descriptors(geo.Metaball.sphere(1.0), 64).row()
    fields = row.split()
    assert len(fields) == 3
    assert all(len(f.split(".")[1]) == 4 for f in fields)


def test_empty_level_set_rejected():
    mb = geo.Metaball(np.zeros((1, 3)), np.array([-1.0]), 0.0)
    with pytest.raises(geo.EmptyLevelSetError):
        metrics.shape_descriptors(mb, 32)


def dkt_series():
    # trailing particle 1 catches up with particle 0, touches, then overtakes
    t = np.linspace(0, 2, 201)
    z0 = 10 - 1.0 * t
    z1 = 12 - 2.5 * t
    recs = []
    for i, ti in enumerate(t):
        p = [[0, 0, z0[i]], [0.1, 0, z1[i]]]
        v = [[0, 0, -1.0], [0, 0, -2.5]]
        recs.append(record(ti, p, v, [[0, 0, 0.5], [0, 0, -0.5]]))
    return recs


def test_dkt_phase_detection():
    m = metrics.dkt_metrics(dkt_series(), H=1.0, d_e=1.0, g=1.0)
    assert m.sequence == ["drafting", "kissing", "tumbling"]
    assert m.t_drafting < m.t_kissing < m.t_tumbling
    assert m.height[-1, 1] < m.height[-1, 0]


def test_dkt_unit_normalisation_is_identity():
    recs = dkt_series()
    m = metrics.dkt_metrics(recs, H=1.0, d_e=1.0, g=1.0)
    assert np.array_equal(m.time, [r.time for r in recs])
    assert np.array_equal(m.height, [r.position[:, 2] for r in recs])
    assert np.array_equal(m.velocity, [r.velocity for r in recs])
    assert np.allclose(m.angular_speed, 0.5 / (2 * np.pi))


def test_dkt_normalisation_scales():
    recs = dkt_series()
    H, g, d = 0.3, 9.81, 0.0125
    m = metrics.dkt_metrics(recs, H=H, d_e=d, g=g)
    t_r = np.sqrt(H / g)
    assert m.time[-1] == pytest.approx(recs[-1].time / t_r)
    assert m.velocity[0, 1, 2] == pytest.approx(-2.5 / np.sqrt(H * g))
    d0 = np.linalg.norm(recs[0].position[0] - recs[0].position[1])
    assert m.distance[0] == pytest.approx(d0 / d)


def test_side_by_side_release_never_tumbles():
    recs = [record(t, [[-1 - 0.1 * t, 0, 5 - t], [1 + 0.1 * t, 0, 5 - t]]) for t in np.linspace(0, 3, 50)]
    m = metrics.dkt_metrics(recs, H=1.0, d_e=1.0, g=1.0)
    assert m.t_tumbling is None
    assert "tumbling" not in m.sequence


def test_dkt_requires_two_particles():
    with pytest.raises(ValueError):
        metrics.dkt_metrics([record(0.0, [[0, 0, 0]])], 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        metrics.dkt_metrics([record(0.0, [[0, 0, 0]] * 3)], 1.0, 1.0, 1.0)
