import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refractive_sdf._jax import jax, jnp
from refractive_sdf.field import AnalyticField, NeuralField, init_sphere
from refractive_sdf.geometry_optics import OpticalConstants, intersect_plane_batch
from refractive_sdf.oracle import TIR, trace_multibounce
from refractive_sdf.shapes import AnalyticShape
from refractive_sdf.tracer import (
    SamplingConfig,
    Status,
    check_self_occlusion,
    format_trace,
    interval_weights,
    parse_trace,
    plan_two_bounce,
    render_two_bounce,
    trace_two_bounce,
    volume_intersect,
)

C = OpticalConstants()
WIDE = SamplingConfig(bound=1.5)
UNIT = AnalyticField(AnalyticShape.sphere(1.0))


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), s=st.floats(1.0, 5000.0))
def test_weights_are_a_sub_probability(seed, s):
    rng = np.random.default_rng(seed)
    g = np.cumsum(rng.normal(size=(5, 40)) * 0.1, axis=-1) + rng.normal(size=(5, 1))
    w = np.asarray(interval_weights(jnp.asarray(g), s))
    assert np.all(w >= 0)
    assert np.all(w.sum(-1) <= 1 + 1e-6)


def test_central_ray_hits_front_of_unit_sphere():
    h = volume_intersect(UNIT, UNIT.init_params(), [[0, 0, -3]], [[0, 0, 1]], WIDE)
    assert bool(h.found[0])
    assert abs(float(h.t_hat[0]) - 2.0) < 0.02
    np.testing.assert_allclose(np.asarray(h.point[0]), [0, 0, -3 + float(h.t_hat[0])], atol=1e-9)
    assert abs(np.linalg.norm(np.asarray(h.normal[0])) - 1) < 1e-6
    w = np.asarray(h.weights)
    assert np.all(w >= 0) and w.sum() <= 1 + 1e-6


def test_missing_ray_has_no_surface():
    h = volume_intersect(UNIT, UNIT.init_params(), [[0, 1.3, -3]], [[0, 0, 1]], WIDE)
    assert float(h.opacity[0]) < 0.05
    assert not bool(h.found[0])


def test_flipped_trace_finds_interior_exit():
    start = np.array([[-0.99, 0.0, 0.0]])
    h = volume_intersect(UNIT, UNIT.init_params(), start, [[1, 0, 0]], WIDE, flip_sign=True)
    assert bool(h.found[0])
    assert abs(float(h.t_hat[0]) - 1.99) < 0.02


@pytest.fixture(scope="module")
def fitted_sphere():
    """A network pre-fitted to the radius-0.5 sphere, with a sharp density."""
    f = NeuralField()
    p = init_sphere(f, seed=0, radius=0.5)
    return f, dict(p, variance=jnp.asarray(np.log(500.0) / 10, jnp.float32))


def _sphere_t(o, d, r):
    b = np.sum(o * d, -1)
    c = np.sum(o * o, -1) - r * r
    disc = b * b - c
    return np.where(disc > 0, -b - np.sqrt(np.maximum(disc, 0)), np.nan)


def test_entry_depth_accuracy_on_fitted_sphere(fitted_sphere):
    f, p = fitted_sphere
    rng = np.random.default_rng(0)
    o = 3 * _unit(rng.normal(size=(500, 3)))
    d = _unit(rng.uniform(-0.5, 0.5, (500, 3)) - o)
    t_true = _sphere_t(o, d, 0.5)
    hits = ~np.isnan(t_true)
    h = volume_intersect(f, p, o[hits], d[hits])
    err = np.abs(np.asarray(h.t_hat, float) - t_true[hits])
    assert np.mean(err < 0.02) >= 0.95


def _closed_form_q(o, d, radius, plane_point, plane_normal):
    b = np.dot(o, d)
    t = -b - np.sqrt(b * b - (np.dot(o, o) - radius**2))
    p1 = o + t * d
    n1 = p1 / radius
    ci = -np.dot(d, n1)
    e = C.eta_enter
    d1 = e * d + (e * ci - np.sqrt(1 - e * e * (1 - ci * ci))) * n1
    p2 = p1 - 2 * np.dot(p1, d1) * d1
    n2 = -p2 / radius
    ci = -np.dot(d1, n2)
    e = C.eta_exit
    d2 = e * d1 + (e * ci - np.sqrt(1 - e * e * (1 - ci * ci))) * n2
    tq = np.dot(plane_point - p2, plane_normal) / np.dot(d2, plane_normal)
    return p2 + tq * d2


def test_central_ray_is_undeviated(fitted_sphere):
    f, p = fitted_sphere
    pp, pn = np.array([0, 0, 2.5]), np.array([0, 0, -1.0])
    path = trace_two_bounce(f, p, [[0, 0, -3]], [[0, 0, 1]], pp, pn, C)
    assert int(path.status[0]) == Status.VALID
    np.testing.assert_allclose(np.asarray(path.dir_out[0]), [0, 0, 1], atol=0.01)
    assert np.linalg.norm(np.asarray(path.q_virtual[0]) - [0, 0, 2.5]) < 0.02


def test_off_centre_rays_match_closed_form_sphere():
    field = AnalyticField(AnalyticShape.sphere(0.5))
    params = field.init_params(1000.0)
    rng = np.random.default_rng(1)
    o = np.tile([0.0, 0.0, -3.0], (50, 1))
    # impact parameters up to 0.8 R keep incidence below ~53 degrees
    tgt = np.concatenate([rng.uniform(-1, 1, (50, 2)), np.zeros((50, 1))], 1)
    tgt = 0.4 * tgt / np.maximum(np.linalg.norm(tgt, axis=-1, keepdims=True), 1.0)
    d = _unit(tgt - o)
    pp, pn = np.array([0, 0, 2.5]), np.array([0, 0, -1.0])
    path = trace_two_bounce(field, params, o, d, pp, pn, C)
    assert np.all(np.asarray(path.status) == Status.VALID)
    for k in range(50):
        q = _closed_form_q(o[k], d[k], 0.5, pp, pn)
        assert np.linalg.norm(np.asarray(path.q_virtual[k]) - q) < 0.03


def test_tir_exit_agrees_with_oracle():
    shape = AnalyticShape.torus()
    field = AnalyticField(shape)
    params = field.init_params(1000.0)
    rng = np.random.default_rng(2)
    o = 3 * _unit(rng.normal(size=(3000, 3)))
    d = _unit(rng.uniform(-0.8, 0.8, (3000, 3)) - o)
    path = trace_two_bounce(field, params, o, d, -o, _unit(o), C)
    tir = np.asarray(path.status) == Status.TIR_EXIT
    assert tir.sum() >= 10
    oracle = trace_multibounce(shape, o[tir], d[tir], C)
    assert np.mean(oracle.count == TIR) >= 0.9


def test_status_tags_and_q_presence(fitted_sphere):
    f, p = fitted_sphere
    o = np.array([[0, 0, -3.0], [0, 0.9, -3.0]])
    d = np.array([[0, 0, 1.0], [0, 0, 1.0]])
    path = trace_two_bounce(f, p, o, d, np.array([0, 0, 2.5]), np.array([0, 0, -1.0]), C)
    assert [Status(int(s)).tag for s in path.status] == ["ValidTwoBounce", "Miss"]
    assert "Q" in parse_trace(format_trace(path, 0))
    assert "Q" not in parse_trace(format_trace(path, 1))


def test_trace_dump_round_trip(fitted_sphere):
    f, p = fitted_sphere
    path = trace_two_bounce(f, p, [[0.05, 0.02, -3]], [[0, 0, 1]], np.array([0, 0, 2.5]), np.array([0, 0, -1.0]), C)
    text = format_trace(path, 0)
    lines = text.splitlines()
    assert [l.split()[0] for l in lines] == ["ENTRY", "EXIT", "Q", "STATUS"]
    parsed = parse_trace(text)
    np.testing.assert_allclose(parsed["Q"], np.asarray(path.q_virtual[0]), rtol=1e-7)
    assert parsed["STATUS"] == "ValidTwoBounce"


def test_convex_sphere_chords_are_never_occluded(fitted_sphere):
    f, p = fitted_sphere
    rng = np.random.default_rng(3)
    o = 3 * _unit(rng.normal(size=(400, 3)))
    d = _unit(rng.uniform(-0.35, 0.35, (400, 3)) - o)
    path = trace_two_bounce(f, p, o, d, -o, _unit(o), C)
    ok = np.asarray(path.status) == Status.VALID
    occ = check_self_occlusion(f, p, path.entry.point, path.dir_interior)
    assert ok.sum() > 300
    assert not np.any(np.asarray(occ.occluded)[ok])


def test_barbell_gap_crossing_is_occluded():
    shape = AnalyticShape.barbell()
    field = AnalyticField(shape)
    params = field.init_params(1000.0)
    o = np.array([[-3.0, 0.0, 0.02], [0.4, -3.0, 0.05]])
    d = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    path = trace_two_bounce(field, params, o, d, np.array([0, 2.5, 0.0]), np.array([0, -1.0, 0]), C)
    occ = check_self_occlusion(field, params, path.entry.point, path.dir_interior)
    counts = trace_multibounce(shape, o, d, C).count
    assert list(counts) == [4, 2]
    assert list(np.asarray(occ.occluded)) == [True, False]


def test_surface_mode_matches_volume_mode_on_sphere():
    cfg = SamplingConfig(bound=1.5, mode="surface")
    h = volume_intersect(UNIT, UNIT.init_params(), [[0, 0, -3], [0.3, 0.2, -3]], [[0, 0, 1], [0, 0, 1]], cfg)
    t_true = _sphere_t(np.array([[0, 0, -3], [0.3, 0.2, -3.0]]), np.array([[0, 0, 1.0]] * 2), 1.0)
    np.testing.assert_allclose(np.asarray(h.t_hat), t_true, atol=1e-3)


def _fd_check(field, params, cfg, n_rays, n_dirs=4, seed=0):
    """Directional derivatives of sum ||Q' - Q||^2 against central differences with the plan held fixed."""
    rng = np.random.default_rng(seed)
    o = 3 * _unit(rng.normal(size=(n_rays, 3)))
    d = _unit(rng.uniform(-0.3, 0.3, (n_rays, 3)) - o)
    pp, pn = jnp.asarray(-2.5 * _unit(o)), jnp.asarray(_unit(o))
    o, d = jnp.asarray(o), jnp.asarray(d)
    plan = plan_two_bounce(field, params, o, d, C, cfg)
    target = jnp.asarray(np.asarray(render_two_bounce(field, params, o, d, pp, pn, C, cfg, plan).q_virtual)
                         + rng.normal(size=(n_rays, 3)) * 0.05)

    def loss(p):
        path = render_two_bounce(field, p, o, d, pp, pn, C, cfg, plan)
        return jnp.sum((path.q_virtual - target) ** 2)

    status = np.asarray(render_two_bounce(field, params, o, d, pp, pn, C, cfg, plan).status)
    assert np.all(status == Status.VALID)
    grad = jax.grad(loss)(params)
    leaves, tree = jax.tree_util.tree_flatten(params)
    g_leaves = jax.tree_util.tree_leaves(grad)
    errs = []
    for _ in range(n_dirs):
        dirs = [rng.normal(size=np.shape(l)) for l in leaves]
        h = 1e-6
        plus = jax.tree_util.tree_unflatten(tree, [l + h * v for l, v in zip(leaves, dirs)])
        minus = jax.tree_util.tree_unflatten(tree, [l - h * v for l, v in zip(leaves, dirs)])
        fd = (float(loss(plus)) - float(loss(minus))) / (2 * h)
        an = sum(float(np.sum(np.asarray(g) * v)) for g, v in zip(g_leaves, dirs))
        errs.append(abs(fd - an) / max(abs(fd), 1e-8))
    return max(errs)


@pytest.fixture(scope="module")
def small_sphere_net():
    f = NeuralField(depth=2, width=16, n_freqs=2)
    p = init_sphere(f, seed=1, radius=0.5, steps=800, dtype=jnp.float64)
    return f, dict(p, variance=jnp.asarray(np.log(200.0) / 10))


def test_q_virtual_parameter_gradient_volume_mode(small_sphere_net):
    f, p = small_sphere_net
    assert _fd_check(f, p, SamplingConfig(), 20) < 1e-2


def test_q_virtual_parameter_gradient_surface_mode(small_sphere_net):
    f, p = small_sphere_net
    # a tight bisection makes the forward root follow the parameters smoothly enough to difference
    assert _fd_check(f, p, SamplingConfig(mode="surface", n_bisection=50), 20) < 1e-2


def test_sampling_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(n_coarse=1)
    with pytest.raises(ValueError):
        SamplingConfig(n_importance_rounds=0)
    with pytest.raises(ValueError):
        SamplingConfig(mode="mesh")
