import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laflow.core import GridMeta, Mask, ScalarVolume
from laflow.errors import AmbiguousDirection, GeometryError, LabelError, OpenSectionWarning
from laflow.geometry import (Probe, bsa_dubois, derive_direction, extract_section, index_by_bsa, interpolate,
                             mask_volume, median_filter3, orient_probe, plane_basis, sphere_region,
                             trace_pathlines)
from laflow.synth import SynthSpec, generate

from conftest import make_dataset


def _tube_mask(shape, spacing, radius, origin=(0.0, 0.0, 0.0)):
    """Tube along z through the grid center; shape is (nz, ny, nx)."""
    nz, ny, nx = shape
    meta = GridMeta((nx, ny, nz, 1), (spacing,) * 3, origin)
    pts = meta.voxel_centers()
    c = np.asarray(origin) + (np.array([nx, ny, nz]) - 1) / 2 * spacing
    r2 = ((pts[..., :2] - c[:2]) ** 2).sum(-1)
    return Mask(meta, (r2 < radius**2).astype(np.uint8)), c


def test_interpolate_exact_on_affine_field(rng):
    meta = GridMeta((6, 7, 8, 1), (0.5, 1.0, 2.0), (1.0, 2.0, 3.0))
    xyz = meta.voxel_centers()
    coef = np.array([0.3, -1.2, 2.5])
    vol = xyz @ coef + 4.0
    lo = np.array(meta.origin)
    hi = lo + (np.array([5, 6, 7])) * np.array(meta.spacing)
    pts = lo + rng.random((50, 3)) * (hi - lo)
    np.testing.assert_allclose(interpolate(vol, meta, pts), pts @ coef + 4.0, rtol=1e-12, atol=1e-12)


def test_interpolate_support_keeps_outside_values_out():
    meta = GridMeta((2, 1, 1, 1))
    vol = np.array([[[1.0, 100.0]]])
    support = np.array([[[True, False]]])
    assert interpolate(vol, meta, [[0.5, 0, 0]], support)[0] == 1.0


@settings(max_examples=50, deadline=None)
@given(n=st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-2))
def test_plane_basis_right_handed(n):
    u, w = plane_basis(n)
    nn = np.asarray(n) / np.linalg.norm(n)
    B = np.stack([u, w, nn])
    np.testing.assert_allclose(B @ B.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(B) == pytest.approx(1.0)


def test_section_area_perpendicular():
    mask, c = _tube_mask((24, 40, 40), 0.5, 8.0)
    sec = extract_section(mask, 1, Probe("p", c, direction=(0, 0, 1)))
    assert not sec.open
    assert sec.area == pytest.approx(np.pi * 64, rel=0.02)


def test_section_area_tilted_60_degrees():
    mask, c = _tube_mask((90, 36, 36), 0.5, 8.0)
    n = (np.sin(np.radians(60)), 0.0, np.cos(np.radians(60)))
    sec = extract_section(mask, 1, Probe("p", c, direction=n))
    assert sec.area == pytest.approx(2 * np.pi * 64, rel=0.03)


def test_section_center_in_background():
    mask, c = _tube_mask((8, 40, 40), 0.5, 8.0)
    with pytest.raises(GeometryError):
        extract_section(mask, 1, Probe("p", (0.0, 0.0, c[2]), direction=(0, 0, 1)))


def test_section_needs_direction():
    mask, c = _tube_mask((8, 40, 40), 0.5, 8.0)
    with pytest.raises(GeometryError):
        extract_section(mask, 1, Probe("p", c))


def test_open_section_warns():
    meta = GridMeta((10, 10, 10, 1))
    mask = Mask(meta, np.ones((10, 10, 10), np.uint8))
    with pytest.warns(OpenSectionWarning):
        sec = extract_section(mask, 1, Probe("p", (4.5, 4.5, 4.5), direction=(0, 0, 1)))
    assert sec.open


def test_flipped_section_reverses_normal():
    mask, c = _tube_mask((8, 40, 40), 0.5, 8.0)
    sec = extract_section(mask, 1, Probe("p", c, direction=(0, 0, 1)))
    f = sec.flipped()
    np.testing.assert_array_equal(f.normal, -sec.normal)
    assert f.area == sec.area


@settings(max_examples=15, deadline=None)
@given(offset=st.lists(st.integers(-500, 500), min_size=3, max_size=3))
def test_section_area_translation_invariant(offset):
    shift = np.asarray(offset) * 0.01
    base, c = _tube_mask((8, 40, 40), 0.5, 8.0)
    moved, c2 = _tube_mask((8, 40, 40), 0.5, 8.0, origin=tuple(shift))
    n = (0.2, 0.1, 1.0)
    a0 = extract_section(base, 1, Probe("p", c, direction=n)).area
    a1 = extract_section(moved, 1, Probe("p", c2, direction=n)).area
    assert a1 == a0


def _alternating(signs):
    data = np.zeros((3, len(signs), 3, 3, 3))
    for t, s in enumerate(signs):
        data[0, t] = s
    return make_dataset(data)


def test_direction_of_uniform_flow():
    ds = _alternating([1.0, 1.0, 1.0])
    region = np.ones((3, 3, 3), bool)
    np.testing.assert_allclose(derive_direction(ds.velocity, region), [1, 0, 0])


def test_direction_cancelling_flow_is_ambiguous():
    ds = _alternating([1.0, -1.0, 1.0, -1.0])
    with pytest.raises(AmbiguousDirection):
        derive_direction(ds.velocity, np.ones((3, 3, 3), bool), k=4)


def test_direction_of_tilted_tube():
    ang = np.radians(30)
    axis = (np.cos(ang), np.sin(ang), 0.0)
    ds, _ = generate(SynthSpec("poiseuille", grid=(48, 48, 20), axis=axis))
    c = (np.array([48, 48, 20]) - 1) / 2.0
    p = orient_probe(ds.velocity, ds.mask, 1, Probe("mv", c, diameter=10.0))
    cosang = np.clip(np.dot(p.direction, axis), -1, 1)
    assert np.degrees(np.arccos(cosang)) < 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(0.01, 100.0))
def test_direction_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(3, 6, 3, 3, 3)) + np.array([1.0, 0.5, 0])[:, None, None, None, None]
    region = np.ones((3, 3, 3), bool)
    d0 = derive_direction(make_dataset(data).velocity, region)
    d1 = derive_direction(make_dataset(data * c).velocity, region)
    np.testing.assert_allclose(d1, d0, atol=1e-5)


def test_sphere_region_counts():
    meta = GridMeta((9, 9, 9, 1))
    sph = sphere_region(meta, (4, 4, 4), 2.0)
    assert sph.sum() == 7  # center plus 6 face neighbours at distance 1


def test_mask_volume_counts():
    labels = np.zeros((10, 10, 20), np.uint8)
    labels[:, :, :10] = 1
    assert mask_volume(Mask(GridMeta((20, 10, 10, 1)), labels), 1) == pytest.approx(1.0)
    with pytest.raises(LabelError):
        mask_volume(Mask(GridMeta((20, 10, 10, 1)), labels), 2)


def test_mask_volume_sphere():
    meta = GridMeta((44, 44, 44, 1))
    sph = sphere_region(meta, (21.5, 21.5, 21.5), 40.0)
    vol = mask_volume(Mask(meta, sph.astype(np.uint8)), 1)
    assert vol == pytest.approx(4 / 3 * np.pi * 20**3 / 1000, rel=0.01)


def test_bsa_and_index():
    assert bsa_dubois(70, 170) == pytest.approx(1.809, abs=1e-3)
    assert index_by_bsa(100, 70, 170) == pytest.approx(55.3, abs=0.05)
    assert index_by_bsa(200, 70, 170) == 2 * index_by_bsa(100, 70, 170)


def _brute_median(vol):
    # upper middle element for the even-sized boundary neighbourhoods
    nz, ny, nx = vol.shape
    out = np.empty(vol.shape)
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                nb = vol[max(k - 1, 0):k + 2, max(j - 1, 0):j + 2, max(i - 1, 0):i + 2]
                srt = np.sort(nb.ravel())
                out[k, j, i] = srt[len(srt) // 2]
    return out


def test_median_matches_brute_force(rng):
    vol = rng.random((8, 8, 8))
    np.testing.assert_array_equal(median_filter3(vol), _brute_median(vol))


def test_median_constant_and_spike():
    vol = np.full((5, 5, 5), 2.0)
    np.testing.assert_array_equal(median_filter3(vol), vol)
    vol[2, 2, 2] = 50.0
    np.testing.assert_array_equal(median_filter3(vol), np.full((5, 5, 5), 2.0))


def test_median_scalar_volume_per_timestep(rng):
    meta = GridMeta((4, 4, 4, 2))
    v = ScalarVolume(meta, rng.random((2, 4, 4, 4)).astype(np.float32))
    out = median_filter3(v)
    np.testing.assert_allclose(out.values[1], _brute_median(v.values[1].astype(np.float64)), rtol=1e-6)


def test_median_binary_stays_binary_and_converges(rng):
    # repeated filtering keeps eroding ridges for tens of passes before it settles
    vol = (rng.random((32, 32, 32)) > 0.5).astype(np.float64)
    cur = median_filter3(vol)
    for _ in range(400):
        assert np.isin(cur, (0.0, 1.0)).all()
        nxt = median_filter3(cur)
        if np.array_equal(nxt, cur):
            break
        cur = nxt
    assert np.array_equal(median_filter3(cur), cur)


def test_pathlines_zero_field():
    ds = make_dataset(np.zeros((3, 4, 6, 6, 6)))
    res = trace_pathlines(ds.velocity, [[2.0, 2.0, 2.0], [3.0, 1.0, 2.5]], window=3)
    assert len(res.lines) == 8
    for line in res.lines:
        np.testing.assert_array_equal(line.points, np.repeat(line.points[:1], len(line.points), axis=0))


def test_pathlines_uniform_step():
    data = np.zeros((3, 6, 8, 8, 40))
    data[0] = 0.1
    ds = make_dataset(data, dt=40.0)
    res = trace_pathlines(ds.velocity, [[2.0, 4.0, 4.0]], window=6, emissions=[0])
    pts = res.lines[0].points
    assert len(pts) == 7
    np.testing.assert_allclose(np.diff(pts[:, 0]), 4.0, atol=1e-9)
    np.testing.assert_allclose(res.lines[0].times_ms, np.arange(7) * 40.0)


def test_pathlines_stop_at_support():
    data = np.zeros((3, 4, 4, 4, 10))
    data[0] = 0.1
    ds = make_dataset(data)
    support = np.zeros((4, 4, 10), bool)
    support[:, :, :6] = True
    res = trace_pathlines(ds.velocity, [[1.0, 1.0, 1.0]], window=4, support=support, emissions=[0])
    pts = res.lines[0].points
    assert len(pts) < 5
    assert pts[-1, 0] <= 5.5


def test_pathlines_skip_outside_seeds():
    ds = make_dataset(np.zeros((3, 2, 4, 4, 4)))
    support = np.zeros((4, 4, 4), bool)
    support[1:3, 1:3, 1:3] = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = trace_pathlines(ds.velocity, [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]], support=support)
    assert res.skipped == 1
    assert {l.seed_index for l in res.lines} == {0}


def test_pathlines_rotation_keeps_radius():
    ds, _ = generate(SynthSpec("solid_rotation", grid=(48, 48, 4), omega=5.0, nt=6, dt_ms=40.0))
    c = np.array([23.5, 23.5, 1.5])
    seed = c + np.array([10.0, 0.0, 0.0])
    res = trace_pathlines(ds.velocity, [seed], window=6, emissions=[0])
    r = np.linalg.norm(res.lines[0].points[:, :2] - c[:2], axis=1)
    assert len(r) == 7
    assert np.max(np.abs(r / 10.0 - 1)) < 1e-3
    # 6 steps of 40 ms at 5 rad/s turn the particle by 1.2 rad
    p = res.lines[0].points[-1] - c
    assert np.arctan2(p[1], p[0]) == pytest.approx(1.2, abs=1e-3)
