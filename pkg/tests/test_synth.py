import json

import numpy as np
import pytest

from laflow.core import FluidProps, load_dataset
from laflow.errors import SpecError
from laflow.geometry import Probe, extract_section
from laflow.metrics import flow_rate_trace
from laflow.synth import MMHG, SynthSpec, analytic_truth, generate, tube_length_mm, write


def test_uniform_every_voxel():
    ds, truth = generate(SynthSpec("uniform", grid=5, velocity=(1.0, 0.0, 0.0)))
    assert np.all(ds.velocity.data[0] == 1.0) and not ds.velocity.data[1:].any()
    assert np.all(ds.magnitude.values == 1.0)
    assert truth["ke_density"] == 0.5 * FluidProps.rho


def test_poiseuille_profile_exact_at_voxel_centers():
    spec = SynthSpec("poiseuille", grid=(20, 20, 4), v_max=0.5)
    ds, _ = generate(spec, np.float64)
    pts = ds.meta.voxel_centers()
    r2 = ((pts[..., :2] - 9.5) ** 2).sum(-1)
    expect = np.where(r2 < 64, 0.5 * (1 - r2 / 64), 0.0)
    np.testing.assert_allclose(ds.velocity.data[2, 0], expect, rtol=1e-15, atol=1e-15)
    assert np.array_equal(ds.mask.labels == 1, r2 < 64)


def test_truth_self_consistent():
    # closed forms recomputed from the spec parameters alone
    spec = SynthSpec("poiseuille", grid=(20, 20, 30), v_max=0.4, radius_mm=8.0)
    _, t = generate(spec)
    R, mu, rho = 8e-3, spec.mu, spec.rho
    L = 30e-3
    assert t["length_mm"] == 30.0
    Q = np.pi * 8**2 * 0.4 / 2
    checks = {
        "flow_rate_ml_s": Q,
        "ke_density": rho * 0.4**2 / 6,
        "el_total_w": 8 * np.pi * mu * L * 0.2**2,
        "dp_mmhg": 8 * mu * L * Q * 1e-6 / (np.pi * R**4) / MMHG,
    }
    for k, v in checks.items():
        assert t[k] == pytest.approx(v, rel=1e-12), k
    assert t["probe_separation_mm"] == pytest.approx(30 - 8)


@pytest.mark.parametrize("kind,key,value", [
    ("solid_rotation", "vorticity_magnitude", 10.0),
    ("solid_rotation", "q", 25.0),
    ("pure_strain", "q", -9.0),
    ("pure_strain", "dissipation", 36.0),
    ("simple_shear", "dissipation", 100.0),
    ("simple_shear", "vorticity_magnitude", 10.0),
])
def test_affine_truths(kind, key, value):
    assert analytic_truth(SynthSpec(kind, grid=4))[key] == value


def test_biphasic_truth_self_consistent():
    spec = SynthSpec("biphasic_inflow", grid=(20, 20, 24), nt=40, dt_ms=25.0)
    t = analytic_truth(spec)
    area = np.pi * 64
    assert t["E"]["volume_ml"] == pytest.approx(area * 0.6 * 0.05 * 1.0 * np.sqrt(2 * np.pi), rel=1e-12)
    assert t["E"]["t_index"] == 18 and t["A"]["t_index"] == 34
    assert t["E_over_A"] == 2.0
    ts = np.arange(40) * 25.0
    wave = 0.6 * np.exp(-0.5 * ((ts - 450) / 50) ** 2) + 0.3 * np.exp(-0.5 * ((ts - 850) / 50) ** 2)
    np.testing.assert_allclose(t["flow_rate_ml_s"], area * wave, rtol=1e-12)


def test_pulsatile_truth():
    spec = SynthSpec("pulsatile_plug", grid=(20, 20, 24), nt=10, dt_ms=100.0)
    t = analytic_truth(spec)
    acc = 0.3 * 2 * np.pi * np.cos(2 * np.pi * np.arange(10) / 10)
    np.testing.assert_allclose(t["accel_m_s2"], acc, rtol=1e-12, atol=1e-15)


def test_under_resolved_tube():
    with pytest.raises(SpecError):
        generate(SynthSpec("poiseuille", grid=16, radius_mm=7.0))
    with pytest.raises(SpecError):
        generate(SynthSpec("poiseuille", grid=24, radius_mm=8.0, spacing_mm=1.5))


def test_speed_beyond_twice_venc():
    with pytest.raises(SpecError):
        generate(SynthSpec("uniform", grid=3, velocity=(3.5, 0, 0), venc_cm_s=150.0))


def test_bad_parameters():
    with pytest.raises(SpecError):
        generate(SynthSpec("vortex_ring"))
    with pytest.raises(SpecError):
        generate(SynthSpec("uniform", grid=3, dt_ms=0.0))
    with pytest.raises(SpecError):
        generate(SynthSpec("solid_rotation", grid=3, omega=-1.0))


def test_biphasic_mv_flux_reproduces_waveform():
    spec = SynthSpec("biphasic_inflow", grid=(24, 24, 16), spacing_mm=1.0, nt=40, dt_ms=25.0, profile="poiseuille")
    ds, truth = generate(spec)
    sec = extract_section(ds.mask, 1, Probe.from_dict(truth["probes"][1]).with_direction((0, 0, 1)))
    q = flow_rate_trace(ds.velocity, sec).values
    exact = np.asarray(truth["flow_rate_ml_s"])
    big = exact > 0.05 * exact.max()
    np.testing.assert_allclose(q[big], exact[big], rtol=0.02)


def test_tube_length_and_finite_tube():
    spec = SynthSpec("poiseuille", grid=(20, 20, 40), length_mm=20.0)
    ds, truth = generate(spec)
    assert tube_length_mm(spec) == 20.0
    z = np.nonzero(ds.mask.labels.any(axis=(1, 2)))[0]
    assert len(z) == 20


def test_write_container_and_truth(tmp_path):
    write(SynthSpec("poiseuille", grid=(20, 20, 8)), tmp_path / "p")
    truth = json.loads((tmp_path / "p" / "truth.json").read_text())
    assert truth["kind"] == "poiseuille"
    ds = load_dataset(tmp_path / "p")
    assert ds.meta.dims == (20, 20, 8, 1)
