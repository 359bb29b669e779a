"""Differential and integral hemodynamic quantities on masked voxel fields.

Velocity gradients use second-order central differences where both axis
neighbours lie in the analysed region and first-order one-sided differences
where only one does. A voxel lacking any in-region neighbour along some axis
is invalid and excluded from every reduction.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import FluidProps, GridMeta, Mask, VelocityField
from .errors import GeometryError, LabelError
from .geometry import SectionGrid, interpolate

QCRIT_THRESHOLD = 500.0  # s^-2; results are reported stable for any value above 100


@dataclass(frozen=True, eq=False)
class TimeTrace:
    name: str
    unit: str
    values: np.ndarray
    dt: float  # ms
    normalization: str = "none"
    flagged: Optional[np.ndarray] = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"trace {self.name} has non-finite values")

    @property
    def nt(self) -> int:
        return len(self.values)

    @property
    def t_ms(self) -> np.ndarray:
        return np.arange(self.nt) * self.dt

    def scaled(self, factor: float, name=None, unit=None) -> "TimeTrace":
        return TimeTrace(name or self.name, unit or self.unit, self.values * factor, self.dt, self.normalization)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_index", "t_ms", "value"])
            for i, (t, v) in enumerate(zip(self.t_ms, self.values)):
                w.writerow([i, f"{t:.6g}", repr(float(v))])

    @classmethod
    def from_csv(cls, path, name=None, unit="") -> "TimeTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        vals = np.array([float(r["value"]) for r in rows])
        t = np.array([float(r["t_ms"]) for r in rows])
        dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        return cls(name or Path(path).stem, unit, vals, dt)


@dataclass(frozen=True, eq=False)
class TensorField:
    meta: GridMeta
    grad: np.ndarray  # (3, 3, nz, ny, nx): grad[i, j] = d v_i / d x_j, 1/s
    valid: np.ndarray  # (nz, ny, nx) bool


# --------------------------------------------------------------------------
# stencils


def _shift(a: np.ndarray, axis: int, s: int, fill=0):
    """b[i] = a[i + s] along ``axis``; positions past the edge get ``fill``."""
    out = np.full_like(a, fill)
    n = a.shape[axis]
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if s > 0:
        src[axis] = slice(s, n)
        dst[axis] = slice(0, n - s)
    else:
        src[axis] = slice(0, n + s)
        dst[axis] = slice(-s, n)
    out[tuple(dst)] = a[tuple(src)]
    return out


class Stencil:
    """Difference coefficients for a fixed region, reused across timesteps.

    For index axis ``c`` (0 = x) the derivative of ``f`` is
    ``cp * f[+1] + c0 * f + cm * f[-1]`` with per-voxel coefficients.
    """

    def __init__(self, region: np.ndarray, spacing_m):
        self.region = np.asarray(region, dtype=bool)
        self.spacing_m = np.asarray(spacing_m, dtype=float)
        self.coef = []
        valid = self.region.copy()
        for c in range(3):
            ax = 2 - c
            h = self.spacing_m[c]
            mp = self.region & _shift(self.region, ax, +1, False)
            mm = self.region & _shift(self.region, ax, -1, False)
            both = mp & mm
            fwd = mp & ~mm
            bwd = mm & ~mp
            cp = np.where(both, 0.5 / h, np.where(fwd, 1.0 / h, 0.0))
            cm = np.where(both, -0.5 / h, np.where(bwd, -1.0 / h, 0.0))
            c0 = np.where(fwd, -1.0 / h, np.where(bwd, 1.0 / h, 0.0))
            self.coef.append((cp, c0, cm))
            valid &= mp | mm
        self.valid = valid

    def derivative(self, f: np.ndarray, c: int) -> np.ndarray:
        cp, c0, cm = self.coef[c]
        ax = 2 - c
        return cp * _shift(f, ax, +1) + c0 * f + cm * _shift(f, ax, -1)

    def gradient(self, frame: np.ndarray) -> np.ndarray:
        """(3, nz, ny, nx) vector frame -> (3, 3, nz, ny, nx) gradient."""
        g = np.empty((3, 3) + frame.shape[1:])
        for i in range(3):
            fi = np.where(self.region, frame[i], 0.0)
            for j in range(3):
                g[i, j] = self.derivative(fi, j)
        g[:, :, ~self.valid] = 0.0
        return g


def _region(mask: Mask, label) -> np.ndarray:
    return mask.region(label)


def velocity_gradient(vel: VelocityField, mask: Mask, label, t: int, stencil: Optional[Stencil] = None) -> TensorField:
    region = _region(mask, label)
    st = stencil if stencil is not None else Stencil(region, vel.meta.spacing_m)
    return TensorField(vel.meta, st.gradient(vel.frame(t)), st.valid)


# --------------------------------------------------------------------------
# pointwise field operators


def _grad(g) -> np.ndarray:
    return g.grad if isinstance(g, TensorField) else g


def vorticity_field(g) -> np.ndarray:
    """Curl, shape (3, nz, ny, nx) in 1/s."""
    a = _grad(g)
    return np.stack([a[2, 1] - a[1, 2], a[0, 2] - a[2, 0], a[1, 0] - a[0, 1]])


def q_criterion_field(g) -> np.ndarray:
    """Q = 1/2 (|Omega|^2 - |S|^2) with Frobenius norms, in 1/s^2."""
    a = _grad(g)
    at = np.swapaxes(a, 0, 1)
    S = 0.5 * (a + at)
    W = 0.5 * (a - at)
    return 0.5 * ((W * W).sum(axis=(0, 1)) - (S * S).sum(axis=(0, 1)))


def dissipation_field(g) -> np.ndarray:
    """Viscous dissipation function (without mu), in 1/s^2.

    1/2 * sum_ij [ (d_j v_i + d_i v_j) - 2/3 (div v) delta_ij ]^2
    """
    a = _grad(g)
    div = a[0, 0] + a[1, 1] + a[2, 2]
    d = a + np.swapaxes(a, 0, 1)
    for i in range(3):
        d[i, i] -= (2.0 / 3.0) * div
    return 0.5 * (d * d).sum(axis=(0, 1))


# --------------------------------------------------------------------------
# traces


def _label_volume_m3(region: np.ndarray, meta: GridMeta) -> float:
    return float(region.sum()) * meta.voxel_volume_m3


def _ke_frame(frame, region, vol_i, rho):
    v2 = (frame * frame).sum(axis=0)
    return 0.5 * rho * float(v2[region].sum()) * vol_i


def kinetic_energy_trace(vel: VelocityField, mask: Mask, label, fluid: FluidProps = FluidProps()):
    """Kinetic energy per timestep: (total in J, per label volume in J/m^3)."""
    region = _region(mask, label)
    meta = vel.meta
    vol_i = meta.voxel_volume_m3
    vals = np.array([_ke_frame(vel.frame(t), region, vol_i, fluid.rho) for t in range(meta.nt)])
    vtot = _label_volume_m3(region, meta)
    return (
        TimeTrace("KE", "J", vals, meta.dt),
        TimeTrace("KE", "J/m^3", vals / vtot, meta.dt, "per_LA_volume"),
    )


def _stack(fields, nt=None):
    arr = np.asarray(fields) if not isinstance(fields, np.ndarray) else fields
    return arr[None] if arr.ndim == 3 else arr


def _valid_at(valid, t, region):
    if valid is None:
        return region
    v = np.asarray(valid)
    return (v[t] if v.ndim == 4 else v) & region


def energy_loss_trace(phi, mask: Mask, label, fluid: FluidProps = FluidProps(), valid=None, dt: Optional[float] = None):
    """Viscous energy loss mu * sum(phi * Vol_i): (W, W/m^3)."""
    region = _region(mask, label)
    meta = mask.meta
    phi = _stack(phi)
    vol_i = meta.voxel_volume_m3
    vals = np.array([fluid.mu * float(phi[t][_valid_at(valid, t, region)].sum()) * vol_i for t in range(len(phi))])
    vtot = _label_volume_m3(region, meta)
    step = meta.dt if dt is None else dt
    return (
        TimeTrace("EL", "W", vals, step),
        TimeTrace("EL", "W/m^3", vals / vtot, step, "per_LA_volume"),
    )


def ke_vel_ratio(ke: TimeTrace, el: TimeTrace, floor: float = 1e-12, cap: float = 1e12) -> TimeTrace:
    """KE / EL per timestep; where EL < ``floor`` the value is ``cap`` and flagged."""
    if ke.nt != el.nt:
        raise ValueError("traces differ in length")
    small = np.abs(el.values) < floor
    ratio = np.where(small, cap, ke.values / np.where(small, 1.0, el.values))
    return TimeTrace("KE/VEL", "s", ratio, ke.dt, ke.normalization, flagged=small)


def vorticity_trace(omega, mask: Mask, label, valid=None, reduction: str = "mean", dt: Optional[float] = None) -> TimeTrace:
    """Vorticity magnitude normalised by label volume.

    ``reduction="mean"``: sum(|w_i| Vol_i) / V_label, in 1/s.
    ``reduction="sum_per_volume"``: sum(|w_i|) / V_label, in 1/(s m^3).
    The two differ by the constant voxel volume.
    """
    if reduction not in ("mean", "sum_per_volume"):
        raise ValueError(f"unknown reduction {reduction!r}")
    region = _region(mask, label)
    meta = mask.meta
    om = np.asarray(omega)
    if om.ndim == 4:
        om = om[None]
    vtot = _label_volume_m3(region, meta)
    vals = []
    for t in range(len(om)):
        mag = np.sqrt((om[t] * om[t]).sum(axis=0))
        s = float(mag[_valid_at(valid, t, region)].sum())
        vals.append(s * meta.voxel_volume_m3 / vtot if reduction == "mean" else s / vtot)
    unit = "1/s" if reduction == "mean" else "1/(s m^3)"
    return TimeTrace("vorticity_LA", unit, np.array(vals), meta.dt if dt is None else dt, "per_LA_volume")


def qcrit_ratio_trace(q, mask: Mask, label, threshold: float = QCRIT_THRESHOLD, valid=None,
                      dt: Optional[float] = None) -> TimeTrace:
    """Percentage of valid label voxels with Q above ``threshold``."""
    region = _region(mask, label)
    q = _stack(q)
    vals = []
    for t in range(len(q)):
        sel = _valid_at(valid, t, region)
        n = int(sel.sum())
        if n == 0:
            raise LabelError("no valid voxels in label")
        vals.append(100.0 * int((q[t][sel] > threshold).sum()) / n)
    return TimeTrace(f"Qcrit{threshold:g}", "%", np.array(vals), mask.meta.dt if dt is None else dt, "per_LA_volume")


def flow_rate_trace(vel: VelocityField, section: SectionGrid, name: str = "flow_rate") -> TimeTrace:
    """Flux through the section per timestep in ml/s (1 m/s * 1 mm^2 = 1 ml/s)."""
    if section.n_samples < 4:
        raise GeometryError(f"degenerate section with {section.n_samples} samples")
    if not vel.meta.same_grid(section.meta):
        raise GeometryError("section and velocity grids differ")
    vals = np.empty(vel.meta.nt)
    for t in range(vel.meta.nt):
        v = interpolate(vel.frame(t), vel.meta, section.points, section.support)
        vals[t] = float((section.normal @ v).sum()) * section.area_element
    return TimeTrace(name, "ml/s", vals, vel.meta.dt)


# --------------------------------------------------------------------------
# streaming driver


@dataclass
class FieldMetrics:
    ke: TimeTrace
    ke_density: TimeTrace
    el: TimeTrace
    el_density: TimeTrace
    ke_vel: TimeTrace
    vorticity: TimeTrace
    qcrit: TimeTrace
    fields: dict = field(default_factory=dict)

    def traces(self) -> dict:
        return {
            "KE": self.ke,
            "KE_density": self.ke_density,
            "EL": self.el,
            "EL_density": self.el_density,
            "KE_VEL": self.ke_vel,
            "vorticity_LA": self.vorticity,
            "Qcrit": self.qcrit,
        }


def field_metrics(vel: VelocityField, mask: Mask, label, fluid: FluidProps = FluidProps(),
                  qcrit_threshold: float = QCRIT_THRESHOLD, threads: int = 1,
                  keep: Sequence[str] = ()) -> FieldMetrics:
    """All per-timestep volume metrics in one pass over the data.

    Timesteps are independent, so they may run on ``threads`` workers; the
    per-timestep reductions are assembled in timestep order, which keeps the
    result identical for any thread count. ``keep`` may name fields
    (``"vorticity"``, ``"q_criterion"``, ``"dissipation"``) to retain.
    """
    region = _region(mask, label)
    meta = vel.meta
    st = Stencil(region, meta.spacing_m)
    vol_i = meta.voxel_volume_m3
    n_valid = int(st.valid.sum())
    if n_valid == 0:
        raise LabelError(f"label {label!r} has no voxel with a full stencil")
    valid = st.valid

    def one(t):
        frame = vel.frame(t)
        g = st.gradient(frame)
        om = vorticity_field(g)
        q = q_criterion_field(g)
        phi = dissipation_field(g)
        out = {
            "ke": _ke_frame(frame, region, vol_i, fluid.rho),
            "el": fluid.mu * float(phi[valid].sum()) * vol_i,
            "om": float(np.sqrt((om * om).sum(axis=0))[valid].sum()) * vol_i,
            "qc": 100.0 * int((q[valid] > qcrit_threshold).sum()) / n_valid,
        }
        kept = {}
        if "vorticity" in keep:
            kept["vorticity"] = om.astype(np.float32)
        if "q_criterion" in keep:
            kept["q_criterion"] = q.astype(np.float32)
        if "dissipation" in keep:
            kept["dissipation"] = (fluid.mu * phi).astype(np.float32)
        return out, kept

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, range(meta.nt)))
    else:
        results = [one(t) for t in range(meta.nt)]
    vtot = _label_volume_m3(region, meta)
    ke = np.array([r[0]["ke"] for r in results])
    el = np.array([r[0]["el"] for r in results])
    om = np.array([r[0]["om"] for r in results])
    qc = np.array([r[0]["qc"] for r in results])
    dt = meta.dt
    ke_d = TimeTrace("KE", "J/m^3", ke / vtot, dt, "per_LA_volume")
    el_d = TimeTrace("EL", "W/m^3", el / vtot, dt, "per_LA_volume")
    fields = {}
    for name in keep:
        fields[name] = [r[1][name] for r in results]
    return FieldMetrics(
        ke=TimeTrace("KE", "J", ke, dt),
        ke_density=ke_d,
        el=TimeTrace("EL", "W", el, dt),
        el_density=el_d,
        ke_vel=ke_vel_ratio(ke_d, el_d),
        vorticity=TimeTrace("vorticity_LA", "1/s", om / vtot, dt, "per_LA_volume"),
        qcrit=TimeTrace(f"Qcrit{qcrit_threshold:g}", "%", qc, dt, "per_LA_volume"),
        fields=fields,
    )
