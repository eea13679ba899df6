import json
import math

import numpy as np
import pytest

from refractive_sdf.capture import (
    TAGS,
    RigSpec,
    generate_dataset,
    load_dataset,
    verify_dataset,
)
from refractive_sdf.errors import ConfigError, FormatError
from refractive_sdf.oracle import trace_multibounce
from refractive_sdf.shapes import AnalyticShape


@pytest.fixture(scope="module")
def sphere_ds():
    return generate_dataset(AnalyticShape.sphere(0.5), RigSpec(), seed=1, gt_resolution=0)


@pytest.fixture(scope="module")
def small_rig():
    return RigSpec(n_views=3, width=24, height=20)


def test_sphere_has_only_two_bounce_interiors(sphere_ds):
    counts = sphere_ds.tag_counts()
    assert counts["MultiBounce"] == 0 and counts["TIR"] == 0
    assert counts["TwoBounce"] > 0
    # a handful of grazing exits leave the monitor; they keep the mask but lose Q
    assert counts["OffMonitor"] < 0.01 * counts["TwoBounce"]


def test_sphere_mask_fraction_matches_projected_disc(sphere_ds):
    rig = sphere_ds.rig
    half_angle = math.asin(0.5 / rig.distance)
    radius_px = (rig.width / 2) * math.tan(half_angle) / math.tan(math.radians(rig.fov_deg / 2))
    expected = math.pi * radius_px**2 / (rig.width * rig.height)
    measured = np.mean([v.mask.mean() for v in sphere_ds.views])
    assert abs(measured - expected) / expected < 0.02


def test_barbell_has_multibounce_band():
    ds = generate_dataset(AnalyticShape.barbell(), RigSpec(elevation_deg=15, n_views=2), gt_resolution=0)
    assert ds.tag_counts()["MultiBounce"] > 0


def test_masks_follow_central_ray_hits(sphere_ds):
    rig = sphere_ds.rig
    for k in (0, 5):
        rec = sphere_ds.views[k]
        o, d = rig.camera(k).rays(np.stack([rec.u + 0.5, rec.v + 0.5], -1))
        res = trace_multibounce(sphere_ds.shape, o, d, rig.constants)
        assert np.array_equal(rec.mask.astype(bool), res.count != 0)
        assert np.all((rec.tag == TAGS.index("Background")) == (rec.mask == 0))


def test_azimuths_uniform():
    az = RigSpec(n_views=7).azimuths()
    np.testing.assert_allclose(np.diff(az), 2 * np.pi / 7, atol=1e-9)


def test_q_only_on_two_bounce_records(sphere_ds):
    for rec in sphere_ds.views:
        two = rec.tag == TAGS.index("TwoBounce")
        assert np.all(~np.isnan(rec.q[two])) and np.all(np.isnan(rec.q[~two]))
    first = next(r for r in sphere_ds.records(0) if r.tag == "TwoBounce")
    assert first.q is not None and first.mask == 1


def test_corrupt_flag_gives_multibounce_q():
    shape = AnalyticShape.barbell()
    rig = RigSpec(elevation_deg=15, n_views=2)
    clean = generate_dataset(shape, rig, gt_resolution=0)
    bad = generate_dataset(shape, rig, gt_resolution=0, corrupt_multibounce_q=True)
    multi = bad.views[0].tag == TAGS.index("MultiBounce")
    assert multi.any()
    assert np.all(np.isnan(clean.views[0].q[clean.views[0].tag == TAGS.index("MultiBounce")]))
    assert np.all(~np.isnan(bad.views[0].q[multi]))


def test_write_load_round_trip_is_bitwise(tmp_path, small_rig):
    ds = generate_dataset(AnalyticShape.torus(), small_rig, seed=3, out_dir=tmp_path / "d", gt_resolution=32)
    back = load_dataset(tmp_path / "d")
    assert back.rig == ds.rig and back.shape == ds.shape and back.seed == 3
    assert all(a.equals(b) for a, b in zip(ds.views, back.views))
    for p, q in zip(ds.planes, back.planes):
        assert np.array_equal(p.point, q.point) and p.half_extent == q.half_extent
    assert (tmp_path / "d" / "gt.obj").exists()
    assert verify_dataset(back) < 1e-7


def test_truncated_view_names_the_file(tmp_path, small_rig):
    generate_dataset(AnalyticShape.sphere(0.5), small_rig, out_dir=tmp_path, gt_resolution=0)
    f = tmp_path / "view_1.csv"
    f.write_text("".join(f.read_text().splitlines(keepends=True)[:-5]))
    with pytest.raises(FormatError, match="view_1.csv"):
        load_dataset(tmp_path)
    lines = f.read_text().splitlines(keepends=True)
    f.write_text("".join(lines[:-1]) + lines[-1][:7])
    with pytest.raises(FormatError, match="view_1.csv"):
        load_dataset(tmp_path)


def test_unknown_version_mentions_both(tmp_path, small_rig):
    generate_dataset(AnalyticShape.sphere(0.5), small_rig, out_dir=tmp_path, gt_resolution=0)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatError, match=r"99.*1"):
        load_dataset(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_rig_validation():
    with pytest.raises(ConfigError):
        generate_dataset(AnalyticShape.sphere(0.5), RigSpec(distance=1.5))
    with pytest.raises(ConfigError):
        generate_dataset(AnalyticShape.sphere(0.5), RigSpec(fov_deg=0))
    with pytest.raises(ConfigError):
        generate_dataset(AnalyticShape.sphere(0.5), RigSpec(bound=0.4))


def test_ray_table_uses_pixel_centres(sphere_ds):
    t = sphere_ds.ray_table()
    n = sphere_ds.rig.width * sphere_ds.rig.height
    assert len(t["mask"]) == sphere_ds.rig.n_views * n
    i = 5 * sphere_ds.rig.width + 7
    _, d = sphere_ds.rig.camera(0).rays(t["pixel"][i][None] + 0.5)
    np.testing.assert_allclose(t["dir"][i], d[0], atol=1e-15)
    assert np.array_equal(t["has_q"], t["tag"] == TAGS.index("TwoBounce"))
