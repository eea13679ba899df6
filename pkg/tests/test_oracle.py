import numpy as np

from refractive_sdf.geometry_optics import OpticalConstants, Ray
from refractive_sdf.oracle import TIR, brute_force_bounce_count, trace_multibounce
from refractive_sdf.shapes import AnalyticShape

C = OpticalConstants()


def test_sphere_central_ray_refracts_twice():
    assert brute_force_bounce_count(AnalyticShape.sphere(0.5), Ray([0, 0, -3], [0, 0, 1]), C) == 2


def test_missing_ray_has_zero_bounces():
    assert brute_force_bounce_count(AnalyticShape.sphere(0.5), Ray([0, 2, -3], [0, 0, 1]), C) == 0


def test_barbell_axis_ray_refracts_four_times():
    # along the axis both spheres are hit at normal incidence: in, out, in, out
    shape = AnalyticShape.barbell()
    assert brute_force_bounce_count(shape, Ray([-3, 0, 0], [1, 0, 0]), C) == 4


def test_two_cylinders_through_both_legs():
    shape = AnalyticShape.two_cylinders()
    assert brute_force_bounce_count(shape, Ray([-3, 0, 0.1], [1, 0, 0]), C) == 4
    assert brute_force_bounce_count(shape, Ray([-0.3, -3, 0.1], [0, 1, 0]), C) == 2


def _sphere_exit(o, d, radius, eta_in, eta_out):
    """Closed-form entry/exit refraction through a centred sphere (independent of the oracle)."""
    b = np.dot(o, d)
    c = np.dot(o, o) - radius**2
    t = -b - np.sqrt(b * b - c)
    p1 = o + t * d
    n1 = p1 / radius
    cos_i = -np.dot(d, n1)
    d1 = eta_in * d + (eta_in * cos_i - np.sqrt(1 - eta_in**2 * (1 - cos_i**2))) * n1
    p2 = p1 - 2 * np.dot(p1, d1) * d1
    n2 = -p2 / radius
    cos_i = -np.dot(d1, n2)
    d2 = eta_out * d1 + (eta_out * cos_i - np.sqrt(1 - eta_out**2 * (1 - cos_i**2))) * n2
    return p1, p2, d2


def test_sphere_paths_match_closed_form():
    shape = AnalyticShape.sphere(0.5)
    rng = np.random.default_rng(0)
    o = np.tile([0.0, 0.0, -3.0], (300, 1))
    disk = rng.uniform(-1, 1, (300, 2))
    disk = 0.45 * disk / np.maximum(np.linalg.norm(disk, axis=-1, keepdims=True), 1.0)
    target = np.concatenate([disk, np.zeros((300, 1))], 1)
    d = target - o
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    res = trace_multibounce(shape, o, d, C)
    hit = res.count == 2
    assert hit.all()
    for k in np.nonzero(hit)[0]:
        p1, p2, d2 = _sphere_exit(o[k], d[k], 0.5, C.eta_enter, C.eta_exit)
        np.testing.assert_allclose(res.first_hit[k], p1, atol=1e-6)
        np.testing.assert_allclose(res.exit_point[k], p2, atol=1e-6)
        np.testing.assert_allclose(res.final_dir[k], d2, atol=1e-5)


def test_torus_has_tir_rays():
    shape = AnalyticShape.torus()
    rng = np.random.default_rng(1)
    o = rng.normal(size=(4000, 3))
    o = 3 * o / np.linalg.norm(o, axis=-1, keepdims=True)
    d = rng.uniform(-0.8, 0.8, (4000, 3)) - o
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    res = trace_multibounce(shape, o, d, C)
    assert np.any(res.count == TIR)
    assert np.all(res.tir == (res.count == TIR))
    assert res.converged.all()
    assert set(np.unique(res.count[res.count > 0]) % 2) <= {0}
