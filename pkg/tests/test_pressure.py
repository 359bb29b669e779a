import numpy as np
import pytest

from laflow.core import GridMeta, Mask
from laflow.errors import GeometryError, SolverError, TopologyError, WindowError
from laflow.geometry import Probe, extract_section
from laflow.metrics import TimeTrace
from laflow.pressure import conjugate_gradient, pressure_peaks, virtual_field, vwerp_trace
from laflow.spectro import PhaseWindows
from laflow.synth import SynthSpec, generate

from conftest import make_dataset


def _sections(mask, probes, direction=(0, 0, 1)):
    return [extract_section(mask, 1, Probe.from_dict(p).with_direction(direction)) for p in probes]


def _tube(kind="poiseuille", **kw):
    spec = SynthSpec(kind, grid=kw.pop("grid", (20, 20, 48)), **kw)
    ds, truth = generate(spec)
    inlet, outlet = _sections(ds.mask, [truth["probes"][0], truth["probes"][2]])
    return spec, ds, truth, virtual_field(ds.mask, 1, inlet, outlet)


@pytest.fixture(scope="module")
def poiseuille():
    return _tube()


def test_zero_field_gives_zero(poiseuille):
    _, ds, _, vf = poiseuille
    zero = make_dataset(np.zeros((3, 3) + ds.meta.shape3))
    p = vwerp_trace(zero.velocity, vf)
    assert not p.values.any()


def test_poiseuille_pressure_drop(poiseuille):
    _, ds, truth, vf = poiseuille
    p = vwerp_trace(ds.velocity, vf)
    assert p.unit == "mmHg"
    assert p.values[0] == pytest.approx(truth["dp_probes_mmhg"], rel=0.10)
    assert p.terms["transient"][0] == 0.0


def test_straight_tube_virtual_field_is_uniform(poiseuille):
    spec, ds, truth, vf = poiseuille
    assert vf.q_w == 1.0
    assert vf.residual <= 1e-8
    k = ds.meta.nz // 2
    sl = vf.support[k]
    wz = vf.w[2, k][sl]
    assert np.abs(wz / wz.mean() - 1).max() < 0.03
    assert np.abs(vf.w[:2, k][:, sl]).max() < 0.03 * wz.mean()
    # unit flux through the slice
    assert wz.sum() * 1e-6 == pytest.approx(1.0, rel=1e-6)


def test_virtual_field_divergence(poiseuille):
    assert poiseuille[3].divergence <= 1e-6


def test_scaled_virtual_field_invariance(poiseuille):
    _, ds, _, vf = poiseuille
    a = vwerp_trace(ds.velocity, vf).values
    b = vwerp_trace(ds.velocity, vf.scaled(3.7)).values
    np.testing.assert_allclose(b, a, rtol=1e-9)


def test_steady_flow_has_no_transient(poiseuille):
    _, ds, _, vf = poiseuille
    data = np.repeat(np.asarray(ds.velocity.data), 4, axis=1)
    steady = make_dataset(data, labels=ds.mask.labels)
    p = vwerp_trace(steady.velocity, vf)
    assert not p.terms["transient"].any()
    assert np.ptp(p.values) == 0


def test_grid_mismatch(poiseuille):
    _, _, _, vf = poiseuille
    other = make_dataset(np.zeros((3, 1, 4, 4, 4)))
    with pytest.raises(GeometryError):
        vwerp_trace(other.velocity, vf)


def test_accelerating_plug():
    spec, ds, truth, vf = _tube("pulsatile_plug", grid=(20, 20, 40), nt=20, dt_ms=40.0)
    p = vwerp_trace(ds.velocity, vf)
    exact = np.asarray(truth["dp_probes_mmhg"])
    # the periodic central difference sees sin(w dt)/(w dt) of the true derivative
    w_dt = 2 * np.pi / spec.nt
    np.testing.assert_allclose(p.values, exact * np.sin(w_dt) / w_dt, rtol=1e-3, atol=1e-3 * np.abs(exact).max())
    i = int(np.argmax(np.abs(exact)))
    assert p.values[i] == pytest.approx(exact[i], rel=0.10)


def test_reversed_flow_flips_sign():
    spec, ds, truth, vf = _tube("pulsatile_plug", grid=(20, 20, 40), nt=16, v0=0.0, v1=0.3)
    p = vwerp_trace(ds.velocity, vf)
    rev = make_dataset(-np.asarray(ds.velocity.data, dtype=np.float64), labels=ds.mask.labels)
    q = vwerp_trace(rev.velocity, vf)
    np.testing.assert_allclose(q.values, -p.values, atol=1e-6 * np.abs(p.values).max())
    w = PhaseWindows((0, 2), (2, 10), (10, 10), (10, 16))
    assert np.sign(pressure_peaks(q, w)["dE_max"]) == -np.sign(pressure_peaks(p, w)["dE_min"])


def _l_duct():
    labels = np.zeros((8, 40, 40), np.uint8)
    labels[2:6, 2:6, 2:38] = 1  # arm along x
    labels[2:6, 2:38, 32:38] = 1  # arm along y
    meta = GridMeta((40, 40, 8, 1))
    return Mask(meta, labels)


def test_l_duct_flux_through_intermediate_sections():
    mask = _l_duct()
    inlet = extract_section(mask, 1, Probe("in", (4.0, 3.5, 3.5), 4.0, direction=(1, 0, 0)))
    outlet = extract_section(mask, 1, Probe("out", (34.5, 34.0, 3.5), 4.0, direction=(0, 1, 0)))
    vf = virtual_field(mask, 1, inlet, outlet)
    for i in (8, 15, 25):
        flux = vf.w[0, :, :, i][mask.labels[:, :, i] == 1].sum() * 1e-6
        assert flux == pytest.approx(1.0, abs=0.01)
    for j in (12, 20, 28):
        flux = vf.w[1, :, j, :][mask.labels[:, j, :] == 1].sum() * 1e-6
        assert flux == pytest.approx(1.0, abs=0.01)


def test_same_plane_is_topology_error():
    mask = _l_duct()
    s = extract_section(mask, 1, Probe("in", (4.0, 3.5, 3.5), 4.0, direction=(1, 0, 0)))
    with pytest.raises(TopologyError):
        virtual_field(mask, 1, s, s)


def test_disconnected_is_topology_error():
    labels = np.zeros((6, 6, 30), np.uint8)
    labels[1:5, 1:5, :12] = 1
    labels[1:5, 1:5, 16:] = 1
    mask = Mask(GridMeta((30, 6, 6, 1)), labels)
    a = extract_section(mask, 1, Probe("a", (4.0, 2.5, 2.5), 4.0, direction=(1, 0, 0)))
    b = extract_section(mask, 1, Probe("b", (24.0, 2.5, 2.5), 4.0, direction=(1, 0, 0)))
    with pytest.raises(TopologyError):
        virtual_field(mask, 1, a, b)


def test_solver_error_carries_stats():
    mask = _l_duct()
    inlet = extract_section(mask, 1, Probe("in", (4.0, 3.5, 3.5), 4.0, direction=(1, 0, 0)))
    outlet = extract_section(mask, 1, Probe("out", (34.5, 34.0, 3.5), 4.0, direction=(0, 1, 0)))
    with pytest.raises(SolverError) as ei:
        virtual_field(mask, 1, inlet, outlet, maxiter=3)
    assert ei.value.stats["iterations"] == 3
    assert ei.value.stats["residual"] > 1e-8


def test_conjugate_gradient_spd(rng):
    m = rng.normal(size=(30, 30))
    A = m @ m.T + 30 * np.eye(30)
    b = rng.normal(size=30)
    x, its, res = conjugate_gradient(A, b, tol=1e-12)
    np.testing.assert_allclose(A @ x, b, atol=1e-9)
    assert res <= 1e-12 and its <= 30


def test_pressure_peaks_sinusoid():
    n = 40
    t = np.arange(n)
    v = 3 * np.sin(2 * np.pi * (t - 10) / 20)
    v[:10] = 0
    v[30:] = 0
    w = PhaseWindows((0, 10), (10, 31), (31, 31), (31, 40))
    pk = pressure_peaks(TimeTrace("dP", "mmHg", v, 25.0), w)
    assert pk["dE_max"] == pytest.approx(3.0)
    assert pk["dE_min"] == pytest.approx(-3.0)
    assert pk["t_dE_max_ms"] == 15 * 25.0
    assert pk["crossings_defined"]
    assert pk["e_zero_crossings_ms"] == pytest.approx([20 * 25.0])


def test_pressure_peaks_flat():
    w = PhaseWindows((0, 10), (10, 20), (20, 20), (20, 40))
    pk = pressure_peaks(TimeTrace("dP", "mmHg", np.zeros(40), 25.0), w)
    assert pk["dE_max"] == pk["dE_min"] == pk["dA_max"] == pk["dA_min"] == 0.0
    assert not pk["crossings_defined"]
    assert pk["zero_crossings_ms"] == []


def test_pressure_peaks_empty_window():
    w = PhaseWindows((0, 10), (10, 40), (40, 40), (40, 40))
    with pytest.raises(WindowError):
        pressure_peaks(TimeTrace("dP", "mmHg", np.ones(40), 25.0), w)
