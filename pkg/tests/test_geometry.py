import numpy as np
import pytest
from hypothesis import given, strategies as st

from midelbm import geometry as geo


def random_metaball(rng, n=4):
    return geo.Metaball(rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(0.05, 0.4, n))


def test_sphere_level_set_is_analytic_sphere(rng):
    k = 2.3
    mb = geo.Metaball.sphere(np.sqrt(k), center=(0.1, -0.2, 0.3))
    d = rng.normal(size=(1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = mb.centers[0] + np.sqrt(k) * d
    assert np.max(np.abs(geo.evaluate(mb, pts) - 1.0)) < 1e-10
    t = np.array([geo.ray_surface_parameter(mb, mb.centers[0] + 3 * di, -3 * di) for di in d[:50]])
    assert np.allclose(3 - 3 * t, np.sqrt(k), atol=1e-10)


def test_gradient_and_hessian_match_finite_differences(rng):
    mb = random_metaball(rng, 5)
    h = 1e-6
    for x in rng.uniform(-1, 1, (20, 3)):
        g = geo.gradient(mb, x)
        fd = np.array([(geo.evaluate(mb, x + h * e) - geo.evaluate(mb, x - h * e)) / (2 * h) for e in np.eye(3)])
        assert np.linalg.norm(g - fd) / np.linalg.norm(g) < 1e-5
        H = geo.hessian(mb, x)
        fdh = np.array([(geo.gradient(mb, x + h * e) - geo.gradient(mb, x - h * e)) / (2 * h) for e in np.eye(3)])
        assert np.allclose(H, H.T)
        assert np.linalg.norm(H - fdh) / np.linalg.norm(H) < 1e-5
        f, g2, H2 = geo.value_grad_hess(mb, x)
        assert f == pytest.approx(geo.evaluate(mb, x))
        assert np.allclose(g2, g) and np.allclose(H2, H)


def test_gradient_points_inward():
    mb = geo.Metaball.sphere(1.0)
    g = geo.gradient(mb, [2.0, 0, 0])
    assert g[0] < 0 and abs(g[1]) < 1e-15


def test_evaluation_on_control_point():
    mb = geo.Metaball.sphere(1.0)
    with pytest.raises(geo.SingularEvaluationError):
        geo.evaluate(mb, [0.0, 0.0, 0.0])
    assert np.isinf(geo.field_values(mb, np.zeros((1, 3))))[0]


def test_invalid_metaballs():
    with pytest.raises(ValueError):
        geo.Metaball(np.zeros((2, 3)), [1.0])
    with pytest.raises(ValueError):
        geo.Metaball(np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        geo.Metaball.sphere(1.0, sphero_radius=-0.1)
    mb = geo.Metaball.sphere(1.0)
    with pytest.raises(ValueError):
        mb.centers[0, 0] = 1.0


def test_ray_miss_returns_none():
    mb = geo.Metaball.sphere(1.0)
    assert geo.ray_surface_parameter(mb, [0, 5, 0], [1, 0, 0]) is None
    assert np.isnan(geo.ray_surface_parameters(mb, [[0, 5, 0]], [[1, 0, 0]]))[0]


def test_mass_properties_of_sphere():
    r = 0.7
    mp = geo.mass_properties(geo.Metaball.sphere(r, center=(1, 2, 3)), density=2.0, resolution=96)
    vol = 4 / 3 * np.pi * r ** 3
    assert mp.volume == pytest.approx(vol, rel=1e-2)
    assert np.allclose(mp.centroid, [1, 2, 3], atol=1e-9)
    assert np.allclose(mp.inertia_tensor, np.eye(3) * 0.4 * mp.mass * r * r, rtol=2e-2, atol=1e-12)


def test_mass_properties_rejects_coarse_grid():
    with pytest.raises(ValueError):
        geo.mass_properties(geo.Metaball.sphere(1.0), resolution=16)


def test_empty_level_set():
    mb = geo.Metaball(np.zeros((1, 3)), [-1.0])
    with pytest.raises(geo.EmptyLevelSetError):
        geo.mass_properties(mb, resolution=32)


def test_dilation_and_hydrodynamic_level():
    r, rs = 1.0, 0.25
    mb = geo.Metaball.sphere(r, sphero_radius=rs)
    assert np.sqrt(mb.dilated().weights[0]) == pytest.approx(r + rs)
    assert geo.hydrodynamic_level(mb) == pytest.approx(r * r / (r + rs) ** 2, rel=1e-9)
    assert geo.hydrodynamic_level(geo.Metaball.sphere(r)) == 1.0


@given(st.integers(0, 10_000))
def test_bounding_box_encloses_level_set(seed):
    rng = np.random.default_rng(seed)
    mb = random_metaball(rng, int(rng.integers(1, 6)))
    box = geo.bounding_box(mb)
    big = geo.Box(box.lo - 1.0, box.hi + 1.0)
    pts = rng.uniform(big.lo, big.hi, (4000, 3))
    inside = geo.field_values(mb, pts) >= 1.0
    assert np.all(box.contains(pts[inside]))


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_rotation_matrix_is_orthonormal(q):
    q = np.asarray(q) / np.linalg.norm(q)
    R = geo.rotation_matrix(q)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


@given(st.integers(0, 10_000))
def test_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    mb = random_metaball(rng)
    off = rng.normal(size=3)
    x = rng.uniform(-1, 1, (50, 3))
    assert np.allclose(geo.field_values(mb.translated(off), x + off), geo.field_values(mb, x))
