"""Analytic synthetic flows used as verification oracles.

Velocities are sampled exactly at voxel centers (no supersampling). Each
generated dataset comes with a ``truth`` dictionary of closed-form values
(flow rate, kinetic-energy density, dissipation, vorticity, Q, relative
pressure) so downstream numerical error is attributable to the consumer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset, FluidProps, GridMeta, Mask, ScalarVolume, VelocityField, save_dataset
from .errors import SpecError

KINDS = ("uniform", "poiseuille", "solid_rotation", "pure_strain", "simple_shear", "pulsatile_plug",
         "biphasic_inflow")
TUBE_KINDS = ("poiseuille", "pulsatile_plug", "biphasic_inflow")
MMHG = 133.322  # Pa


@dataclass
class SynthSpec:
    kind: str
    grid: tuple = (64, 64, 64)  # (nx, ny, nz); an int means a cube
    spacing_mm: float = 1.0
    nt: int = 1
    dt_ms: float = 40.0
    venc_cm_s: float = 150.0
    # tube geometry
    radius_mm: float = 8.0
    length_mm: Optional[float] = None  # None: the tube spans the grid
    axis: tuple = (0.0, 0.0, 1.0)
    center_mm: Optional[tuple] = None  # None: grid center
    # kinematics
    velocity: tuple = (1.0, 0.0, 0.0)  # uniform, m/s
    v_max: float = 0.5  # poiseuille centerline, m/s
    omega: float = 5.0  # solid rotation about z, 1/s
    strain_rate: float = 3.0  # pure strain, 1/s
    shear_rate: float = 10.0  # simple shear, 1/s
    v0: float = 0.2  # pulsatile plug mean, m/s
    v1: float = 0.3  # pulsatile plug amplitude, m/s
    # biphasic inflow: two Gaussian waves, times and widths as cycle fractions
    e_peak: float = 0.6  # m/s
    a_peak: float = 0.3
    e_time: float = 0.45
    a_time: float = 0.85
    e_width: float = 0.05
    a_width: float = 0.05
    profile: str = "plug"  # or "poiseuille" for biphasic_inflow
    label: int = 1
    rho: float = FluidProps.rho
    mu: float = FluidProps.mu

    def __post_init__(self):
        if isinstance(self.grid, (int, np.integer)):
            self.grid = (int(self.grid),) * 3
        self.grid = tuple(int(g) for g in self.grid)
        self.axis = tuple(float(a) for a in self.axis)
        self.velocity = tuple(float(v) for v in self.velocity)
        if self.center_mm is not None:
            self.center_mm = tuple(float(c) for c in self.center_mm)

    @property
    def cycle_ms(self) -> float:
        return self.nt * self.dt_ms

    def meta(self) -> GridMeta:
        nx, ny, nz = self.grid
        return GridMeta(dims=(nx, ny, nz, self.nt), spacing=(self.spacing_mm,) * 3, dt=self.dt_ms,
                        venc=self.venc_cm_s)

    def center(self) -> np.ndarray:
        if self.center_mm is not None:
            return np.asarray(self.center_mm)
        return (np.asarray(self.grid) - 1) / 2.0 * self.spacing_mm


def _validate(spec: SynthSpec) -> None:
    if spec.kind not in KINDS:
        raise SpecError(f"unknown kind {spec.kind!r}; expected one of {KINDS}")
    if min(spec.grid) < 2 or spec.nt < 1:
        raise SpecError("grid needs >= 2 voxels per axis and nt >= 1")
    for name in ("spacing_mm", "dt_ms", "venc_cm_s", "rho", "mu"):
        if not getattr(spec, name) > 0:
            raise SpecError(f"{name} must be positive")
    if spec.kind in TUBE_KINDS:
        if not spec.radius_mm > 0:
            raise SpecError("radius_mm must be positive")
        if spec.radius_mm / spec.spacing_mm < 8:
            raise SpecError(f"radius {spec.radius_mm} mm spans fewer than 8 voxels")
        if spec.length_mm is not None and not spec.length_mm > 0:
            raise SpecError("length_mm must be positive")
        if np.linalg.norm(spec.axis) == 0:
            raise SpecError("axis must be non-zero")
        if spec.profile not in ("plug", "poiseuille"):
            raise SpecError("profile must be 'plug' or 'poiseuille'")
    if spec.kind == "poiseuille" and not spec.v_max > 0:
        raise SpecError("v_max must be positive")
    if spec.kind == "solid_rotation" and not spec.omega > 0:
        raise SpecError("omega must be positive")
    if spec.kind == "pure_strain" and not spec.strain_rate > 0:
        raise SpecError("strain_rate must be positive")
    if spec.kind == "simple_shear" and not spec.shear_rate > 0:
        raise SpecError("shear_rate must be positive")
    if spec.kind == "biphasic_inflow" and not (spec.e_peak > 0 and spec.a_peak > 0 and spec.e_width > 0
                                               and spec.a_width > 0):
        raise SpecError("biphasic amplitudes and widths must be positive")


def _tube_frame(spec: SynthSpec, pts: np.ndarray):
    """Axial coordinate s and squared radial distance for points (..., 3) mm."""
    a = np.asarray(spec.axis) / np.linalg.norm(spec.axis)
    rel = pts - spec.center()
    s = rel @ a
    r2 = (rel * rel).sum(axis=-1) - s * s
    return a, s, np.maximum(r2, 0.0)


def tube_length_mm(spec: SynthSpec) -> float:
    """Tube length actually covered by the mask."""
    meta = spec.meta()
    a, s, r2 = _tube_frame(spec, meta.voxel_centers())
    inside = r2 < spec.radius_mm**2
    if spec.length_mm is not None:
        return float(spec.length_mm)
    return float(s[inside].max() - s[inside].min() + spec.spacing_mm)


def waveform(spec: SynthSpec, t_ms: np.ndarray) -> np.ndarray:
    """Imposed cross-section velocity scale for the time-varying tube kinds (m/s)."""
    t_ms = np.asarray(t_ms, dtype=float)
    T = spec.cycle_ms
    if spec.kind == "pulsatile_plug":
        return spec.v0 + spec.v1 * np.sin(2 * np.pi * t_ms / T)
    if spec.kind == "biphasic_inflow":
        e = spec.e_peak * np.exp(-0.5 * ((t_ms - spec.e_time * T) / (spec.e_width * T)) ** 2)
        a = spec.a_peak * np.exp(-0.5 * ((t_ms - spec.a_time * T) / (spec.a_width * T)) ** 2)
        return e + a
    return np.ones_like(t_ms)


def generate(spec: SynthSpec, dtype=np.float32):
    """Build the dataset and its analytic truth: returns ``(Dataset, dict)``.

    ``dtype=np.float64`` keeps the in-memory velocities in double precision,
    which isolates operator error from the float32 storage rounding.
    """
    _validate(spec)
    meta = spec.meta()
    pts = meta.voxel_centers()  # (nz, ny, nx, 3) mm
    rel_m = (pts - spec.center()) * 1e-3
    x, y = rel_m[..., 0], rel_m[..., 1]
    nt = spec.nt
    data = np.zeros((3, nt) + meta.shape3, dtype=dtype)
    if spec.kind in TUBE_KINDS:
        a, s, r2 = _tube_frame(spec, pts)
        region = r2 < spec.radius_mm**2
        if spec.length_mm is not None:
            region &= np.abs(s) <= spec.length_mm / 2.0
        if spec.kind == "poiseuille" or (spec.kind == "biphasic_inflow" and spec.profile == "poiseuille"):
            shape = np.where(region, 1.0 - r2 / spec.radius_mm**2, 0.0)
        else:
            shape = region.astype(np.float64)
        scale = waveform(spec, np.arange(nt) * spec.dt_ms)
        if spec.kind == "poiseuille":
            scale = np.full(nt, spec.v_max)
        for t in range(nt):
            for c in range(3):
                data[c, t] = scale[t] * a[c] * shape
    else:
        region = np.ones(meta.shape3, dtype=bool)
        if spec.kind == "uniform":
            comps = [np.full(meta.shape3, v) for v in spec.velocity]
        elif spec.kind == "solid_rotation":
            comps = [-spec.omega * y, spec.omega * x, np.zeros_like(x)]
        elif spec.kind == "pure_strain":
            comps = [spec.strain_rate * x, -spec.strain_rate * y, np.zeros_like(x)]
        else:
            comps = [spec.shear_rate * y, np.zeros_like(x), np.zeros_like(x)]
        for t in range(nt):
            for c in range(3):
                data[c, t] = comps[c]
    vel = VelocityField(meta, data)
    limit = 2.0 * spec.venc_cm_s / 100.0
    if vel.max_speed() > limit * (1 + 1e-6):
        raise SpecError(f"peak speed exceeds 2*venc = {limit:.3f} m/s; raise venc_cm_s")
    mag = ScalarVolume(meta, np.ones(meta.shape4, dtype=np.float32), "a.u.", "magnitude")
    labels = np.where(region, spec.label, 0).astype(np.uint8)
    ds = Dataset(vel, mag, Mask(meta.with_nt(1), labels), FluidProps(spec.rho, spec.mu))
    return ds, analytic_truth(spec)


def _probe(name, center, role="custom"):
    return {"name": name, "center_mm": [float(c) for c in center], "diameter_mm": 6.0, "role": role}


def analytic_truth(spec: SynthSpec) -> dict:
    """Closed-form reference values for ``spec``."""
    _validate(spec)
    rho, mu = spec.rho, spec.mu
    truth = {"kind": spec.kind, "spec": asdict(spec)}
    t_ms = np.arange(spec.nt) * spec.dt_ms
    truth["t_ms"] = t_ms.tolist()
    if spec.kind == "uniform":
        v = np.asarray(spec.velocity)
        truth.update(velocity=v.tolist(), ke_density=0.5 * rho * float(v @ v), dissipation=0.0,
                     vorticity=[0.0, 0.0, 0.0], q=0.0)
    elif spec.kind == "solid_rotation":
        w = spec.omega
        truth.update(vorticity=[0.0, 0.0, 2 * w], vorticity_magnitude=2 * w, q=w * w, dissipation=0.0)
    elif spec.kind == "pure_strain":
        a = spec.strain_rate
        truth.update(vorticity=[0.0, 0.0, 0.0], vorticity_magnitude=0.0, q=-a * a, dissipation=4 * a * a)
    elif spec.kind == "simple_shear":
        g = spec.shear_rate
        truth.update(vorticity=[0.0, 0.0, -g], vorticity_magnitude=g, q=0.0, dissipation=g * g)
    else:
        R_mm = spec.radius_mm
        R = R_mm * 1e-3
        L_mm = tube_length_mm(spec)
        area_mm2 = np.pi * R_mm**2
        axis = np.asarray(spec.axis) / np.linalg.norm(spec.axis)
        c = spec.center()
        margin = 4 * spec.spacing_mm
        half = L_mm / 2.0 - margin
        probes = [
            _probe("inlet", c - half * axis),
            _probe("MV", c, "valve"),
            _probe("outlet", c + half * axis),
        ]
        truth["probes"] = probes
        truth["probe_separation_mm"] = 2 * half
        truth["length_mm"] = L_mm
        truth["area_mm2"] = area_mm2
        if spec.kind == "poiseuille":
            vm = spec.v_max
            Q = area_mm2 * vm / 2.0  # ml/s
            Q_m3 = Q * 1e-6
            L = L_mm * 1e-3
            dp_pa = 8 * mu * L * Q_m3 / (np.pi * R**4)
            truth.update(
                v_max=vm,
                v_mean=vm / 2.0,
                flow_rate_ml_s=Q,
                ke_density=0.5 * rho * vm**2 / 3.0,
                el_total_w=8 * np.pi * mu * L * (vm / 2.0) ** 2,
                dp_per_mm_mmhg=dp_pa / L_mm / MMHG,
                dp_mmhg=dp_pa / MMHG,
                dp_probes_mmhg=dp_pa / L_mm * 2 * half / MMHG,
            )
        else:
            v = waveform(spec, t_ms)
            mean_factor = 0.5 if (spec.kind == "biphasic_inflow" and spec.profile == "poiseuille") else 1.0
            flow = area_mm2 * v * mean_factor
            truth["velocity_scale"] = v.tolist()
            truth["flow_rate_ml_s"] = flow.tolist()
            if spec.kind == "pulsatile_plug":
                T = spec.cycle_ms * 1e-3
                accel = spec.v1 * 2 * np.pi / T * np.cos(2 * np.pi * t_ms * 1e-3 / T)
                truth["accel_m_s2"] = accel.tolist()
                truth["dp_per_mm_mmhg"] = (rho * accel * 1e-3 / MMHG).tolist()
                truth["dp_probes_mmhg"] = (rho * accel * 2 * half * 1e-3 / MMHG).tolist()
            else:
                T_s = spec.cycle_ms * 1e-3
                sq = np.sqrt(2 * np.pi)
                e_idx = int(np.argmin(np.abs(t_ms - spec.e_time * spec.cycle_ms)))
                a_idx = int(np.argmin(np.abs(t_ms - spec.a_time * spec.cycle_ms)))
                truth["E"] = {
                    "t_index": e_idx,
                    "velocity_m_s": spec.e_peak,
                    "flow_ml_s": area_mm2 * spec.e_peak * mean_factor,
                    "volume_ml": area_mm2 * spec.e_peak * mean_factor * spec.e_width * T_s * sq,
                }
                truth["A"] = {
                    "t_index": a_idx,
                    "velocity_m_s": spec.a_peak,
                    "flow_ml_s": area_mm2 * spec.a_peak * mean_factor,
                    "volume_ml": area_mm2 * spec.a_peak * mean_factor * spec.a_width * T_s * sq,
                }
                truth["E_over_A"] = spec.e_peak / spec.a_peak
                truth["Evol_over_Avol"] = (spec.e_peak * spec.e_width) / (spec.a_peak * spec.a_width)
    return truth


def write(spec: SynthSpec, out) -> Path:
    """Generate ``spec`` and write the container plus ``truth.json``."""
    ds, truth = generate(spec)
    out = Path(out)
    save_dataset(ds, out)
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return out
