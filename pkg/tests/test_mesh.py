import numpy as np
import pytest

from refractive_sdf.errors import EmptyFieldError, FormatError
from refractive_sdf.mesh import (
    TriangleMesh,
    evaluate,
    marching_cubes,
    nearest_distances,
    read_obj,
    sample_surface,
    write_obj,
)
from refractive_sdf.shapes import AnalyticShape


@pytest.fixture(scope="module")
def unit_sphere_64():
    return marching_cubes(AnalyticShape.sphere(1.0).sdf, bound=1.2, resolution=64)


def _slab(center=(0.0, 0.0, 0.0), size=(1.0, 1.0, 0.05)):
    """Closed axis-aligned box mesh."""
    c, h = np.asarray(center), np.asarray(size) / 2
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float) * h + c
    f = [[0, 2, 3], [0, 3, 1], [4, 5, 7], [4, 7, 6], [0, 1, 5], [0, 5, 4],
         [2, 6, 7], [2, 7, 3], [0, 4, 6], [0, 6, 2], [1, 3, 7], [1, 7, 5]]
    return TriangleMesh(v, np.array(f))


def test_sphere_vertices_close_to_surface(unit_sphere_64):
    cell = 2.4 / 64
    r = np.linalg.norm(unit_sphere_64.vertices, axis=-1)
    assert np.max(np.abs(r - 1)) < 1.5 * cell


def test_sphere_area_and_topology():
    m = marching_cubes(AnalyticShape.sphere(1.0).sdf, bound=1.2, resolution=128)
    assert abs(m.area() - 4 * np.pi) / (4 * np.pi) < 0.02
    assert m.is_watertight()
    assert m.euler_characteristic() == 2


def test_torus_is_watertight_genus_one():
    m = marching_cubes(AnalyticShape.torus().sdf, bound=1.0, resolution=64)
    assert m.is_watertight()
    assert m.euler_characteristic() == 0


def test_constant_positive_field_is_empty():
    with pytest.raises(EmptyFieldError):
        marching_cubes(lambda x: np.ones(len(x)), bound=1.0, resolution=8)
    with pytest.raises(ValueError):
        marching_cubes(AnalyticShape.sphere(0.5).sdf, bound=1.0, resolution=4)


def test_obj_round_trip(tmp_path, unit_sphere_64):
    p = tmp_path / "s.obj"
    write_obj(p, unit_sphere_64)
    back = read_obj(p)
    assert np.array_equal(back.vertices, unit_sphere_64.vertices)
    assert np.array_equal(back.triangles, unit_sphere_64.triangles)


def test_malformed_obj_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 x\n")
    with pytest.raises(FormatError, match=":4:"):
        read_obj(p)
    p.write_text("v 0 0 0\n")
    with pytest.raises(FormatError):
        read_obj(p)
    p.write_text("v 0 0 0\nf 1 2 3\n")
    with pytest.raises(FormatError):
        read_obj(p)


def test_single_triangle_samples_inside():
    tri = TriangleMesh(np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    pts = sample_surface(tri, 5000, seed=3)
    assert np.all(pts[:, 2] == 0)
    b1, b2 = pts[:, 0] / 2, pts[:, 1]
    assert np.all(b1 >= -1e-12) and np.all(b2 >= -1e-12) and np.all(b1 + b2 <= 1 + 1e-12)
    assert np.array_equal(pts, sample_surface(tri, 5000, seed=3))


def test_kdtree_matches_brute_force_bitwise():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 1000, 3))
    assert np.array_equal(nearest_distances(a, b, "kdtree"), nearest_distances(a, b, "brute"))


@pytest.mark.parametrize("mesh", ["sphere", "slab"])
def test_identical_meshes_score_perfectly(mesh, unit_sphere_64):
    m = unit_sphere_64 if mesh == "sphere" else _slab()
    r = evaluate(m, m, n=20000)
    assert r.precision == r.recall == r.f_score == 1.0
    assert r.accuracy == r.completeness == 0.0
    assert r.tau == 0.01


def test_translated_slab():
    gt = _slab()
    delta = 0.005
    r = evaluate(_slab(center=(0, 0, delta)), gt, n=20000)
    assert r.precision == 1.0 and r.recall == 1.0
    assert abs(r.accuracy - delta) < 0.2 * delta


def test_far_apart_meshes_score_zero():
    r = evaluate(_slab(center=(5, 0, 0)), _slab(), n=5000)
    assert r.precision == r.recall == r.f_score == 0.0


def test_accuracy_completeness_swap(unit_sphere_64):
    other = _slab()
    ab = evaluate(unit_sphere_64, other, n=20000)
    ba = evaluate(other, unit_sphere_64, n=20000)
    assert ab.accuracy == ba.completeness and ab.completeness == ba.accuracy
    assert ab.precision == ba.recall


def test_report_json_has_tau():
    import json

    r = evaluate(_slab(), _slab(), n=1000, tau=0.02)
    assert json.loads(r.to_json())["tau"] == 0.02
