"""Doppler-like spectrograms from probe spheres, filling-phase windows and wave peaks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import VelocityField
from .errors import PeakError, ProbeError, RatioError, WindowError
from .geometry import Probe, _unit, sphere_region
from .metrics import TimeTrace

N_BINS = 64
NOISE_FLOOR_ML_S = 5.0
ONSET_FRACTION = 0.02
MIN_SPHERE_SAMPLES = 10


@dataclass(frozen=True, eq=False)
class SpectroMatrix:
    bins: np.ndarray  # (nbins + 1,) edges, m/s
    density: np.ndarray  # (nt, nbins)
    direction: np.ndarray
    n_samples: int
    dt: float  # ms
    probe: str = ""

    @property
    def nt(self) -> int:
        return self.density.shape[0]

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bins[1:] + self.bins[:-1])

    @property
    def bin_width(self) -> float:
        return float(self.bins[1] - self.bins[0])

    def envelope(self, mode: str = "max") -> TimeTrace:
        """Per-column velocity read off the spectrogram.

        ``max``/``min`` give the center of the highest/lowest occupied bin,
        ``mean`` the density-weighted mean velocity.
        """
        c = self.centers
        occupied = self.density > 0
        if mode == "mean":
            vals = self.density @ c
        elif mode == "max":
            vals = np.array([c[np.nonzero(o)[0][-1]] if o.any() else 0.0 for o in occupied])
        elif mode == "min":
            vals = np.array([c[np.nonzero(o)[0][0]] if o.any() else 0.0 for o in occupied])
        else:
            raise ValueError("mode must be 'max', 'min' or 'mean'")
        return TimeTrace(f"{self.probe}_velocity_{mode}", "m/s", vals, self.dt)

    def to_csv(self, path) -> None:
        """Rows are bins (lower edge, upper edge, then one column per timestep)."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["bin_low", "bin_high"] + [f"t{t}" for t in range(self.nt)])
            for b in range(self.density.shape[1]):
                wr.writerow([repr(float(self.bins[b])), repr(float(self.bins[b + 1]))]
                            + [repr(float(x)) for x in self.density[:, b]])


def _sphere_points(vel: VelocityField, probe: Probe, support: Optional[np.ndarray]):
    if probe.direction is None:
        raise ProbeError(f"probe {probe.name}: direction not derived")
    region = sphere_region(vel.meta, probe.center, probe.diameter, support)
    n = int(region.sum())
    if n < MIN_SPHERE_SAMPLES:
        raise ProbeError(f"probe {probe.name}: {n} voxels inside the sphere, need {MIN_SPHERE_SAMPLES}")
    return region


def sample_sphere(vel: VelocityField, probe: Probe, t: int, support: Optional[np.ndarray] = None) -> np.ndarray:
    """Velocity projected on the probe direction at voxel centers inside the sphere (m/s)."""
    region = _sphere_points(vel, probe, support)
    n = _unit(probe.direction)
    v = vel.data[:, t][:, region].astype(np.float64)
    return n @ v


def spectrogram(vel: VelocityField, probe: Probe, nbins: int = N_BINS,
                support: Optional[np.ndarray] = None) -> SpectroMatrix:
    """Per-timestep histogram of projected velocities over ``[-venc, venc]``.

    Samples beyond the encoding range are counted in the edge bins.
    """
    region = _sphere_points(vel, probe, support)
    n = _unit(probe.direction)
    venc = vel.meta.venc / 100.0
    edges = np.linspace(-venc, venc, nbins + 1)
    dens = np.zeros((vel.meta.nt, nbins))
    for t in range(vel.meta.nt):
        s = np.clip(n @ vel.data[:, t][:, region].astype(np.float64), -venc, venc)
        h, _ = np.histogram(s, bins=edges)
        dens[t] = h / h.sum()
    return SpectroMatrix(edges, dens, n, int(region.sum()), vel.meta.dt, probe.name)


# --------------------------------------------------------------------------
# filling phases


@dataclass(frozen=True)
class PhaseWindows:
    """Half-open sample ranges ``(start, stop)`` over one cycle."""

    systole: tuple
    E: tuple
    diastasis: tuple
    A: tuple
    fused: bool = False
    threshold: float = 0.0

    def to_dict(self) -> dict:
        return {"systole": list(self.systole), "E": list(self.E), "diastasis": list(self.diastasis),
                "A": list(self.A), "fused": self.fused, "threshold": self.threshold}


def _local_maxima(v: np.ndarray, lo: int, hi: int) -> list:
    out = []
    for i in range(lo, hi):
        left = v[i - 1] if i > lo else -np.inf
        right = v[i + 1] if i + 1 < hi else -np.inf
        if v[i] >= left and v[i] > right:
            out.append(i)
    return out


def phase_windows(mv_flow: TimeTrace) -> PhaseWindows:
    """Split a mitral flow trace into systole, E, diastasis and A windows.

    Onset is the first sample above 2% of the peak; a peak under 5 ml/s is
    treated as no flow. E and A are
    the two largest local maxima after onset; a below-threshold run between
    them is diastasis, otherwise they split at the inter-peak minimum. With a
    single hump the split falls on the largest second difference after the
    peak and the windows are flagged ``fused``.
    """
    v = np.asarray(mv_flow.values, dtype=np.float64)
    n = len(v)
    peak = float(v.max()) if n else 0.0
    if peak < NOISE_FLOOR_ML_S:
        raise WindowError(f"mitral flow peak {peak:.3g} ml/s is below the {NOISE_FLOOR_ML_S} ml/s noise floor")
    thr = ONSET_FRACTION * peak
    onset = int(np.argmax(v > thr))
    maxima = [i for i in _local_maxima(v, onset, n) if v[i] > thr]
    systole = (0, onset)
    if not maxima:
        return PhaseWindows(systole, (onset, n), (n, n), (n, n), True, thr)
    if len(maxima) >= 2:
        p1, p2 = sorted(sorted(maxima, key=lambda i: (-v[i], i))[:2])
        below = np.nonzero(v[p1:p2] <= thr)[0]
        if below.size:
            d0, d1 = p1 + int(below[0]), p1 + int(below[-1]) + 1
            return PhaseWindows(systole, (onset, d0), (d0, d1), (d1, n), False, thr)
        m = p1 + int(np.argmin(v[p1:p2 + 1]))
        return PhaseWindows(systole, (onset, m), (m, m), (m, n), True, thr)
    p = maxima[0]
    above = np.nonzero(v > thr)[0]
    last = int(above[-1])
    if last - p < 3:
        return PhaseWindows(systole, (onset, n), (n, n), (n, n), True, thr)
    d2 = v[p:last - 1] - 2 * v[p + 1:last] + v[p + 2:last + 1]  # second difference at p+1 .. last-1
    m = p + 1 + int(np.argmax(d2))
    return PhaseWindows(systole, (onset, m), (m, m), (m, n), True, thr)


# --------------------------------------------------------------------------
# peaks and volumes


@dataclass(frozen=True)
class Peak:
    wave: str
    t_index: int
    value: float
    unit: str


@dataclass(frozen=True, eq=False)
class PeakSet:
    kind: str
    peaks: dict  # wave -> Peak
    windows: PhaseWindows

    def __getitem__(self, wave: str) -> Peak:
        return self.peaks[wave]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "peaks": {k: {"t_index": p.t_index, "value": p.value, "unit": p.unit} for k, p in self.peaks.items()},
            "windows": self.windows.to_dict(),
        }


def smooth3(v: np.ndarray) -> np.ndarray:
    """Periodic 3-point moving average."""
    return (np.roll(v, 1) + v + np.roll(v, -1)) / 3.0


def _extreme(v, s, win, name, largest=True) -> int:
    a, b = win
    if b - a < 3:
        raise PeakError(f"{name} window has {max(b - a, 0)} samples, need 3")
    seg = s[a:b]
    return a + int(np.argmax(seg) if largest else np.argmin(seg))


def detect_peaks(trace: TimeTrace, windows: PhaseWindows, kind: str = "MV") -> PeakSet:
    """E/A peaks of mitral flow or S/D/Ar peaks of pulmonary venous flow.

    Extremes are located on the smoothed trace; values are read from the
    unsmoothed trace at those indices.
    """
    v = np.asarray(trace.values, dtype=np.float64)
    s = smooth3(v)
    unit = trace.unit
    if kind == "MV":
        iE = _extreme(v, s, windows.E, "E")
        iA = _extreme(v, s, windows.A, "A")
        peaks = {"E": Peak("E", iE, float(v[iE]), unit), "A": Peak("A", iA, float(v[iA]), unit)}
    elif kind == "PV":
        diastole = (windows.E[0], windows.A[0])  # E plus diastasis
        iS = _extreme(v, s, windows.systole, "systole")
        iD = _extreme(v, s, diastole, "diastole")
        iAr = _extreme(v, s, windows.A, "A", largest=False)
        peaks = {"S": Peak("S", iS, float(v[iS]), unit), "D": Peak("D", iD, float(v[iD]), unit),
                 "Ar": Peak("Ar", iAr, float(v[iAr]), unit)}
    else:
        raise ValueError("kind must be 'MV' or 'PV'")
    return PeakSet(kind, peaks, windows)


def _trapezoid_window(v: np.ndarray, win: tuple, dt_s: float) -> float:
    """Trapezoid from the window's first sample to the next window's first sample."""
    a, b = win
    idx = np.arange(a, b + 1) % len(v)
    seg = v[idx]
    return float(dt_s * (seg[1:] + seg[:-1]).sum() / 2.0)


def wave_volumes(mv_flow: TimeTrace, windows: PhaseWindows) -> tuple:
    """Positive mitral inflow integrated over the E and A windows (ml)."""
    for name, (a, b) in (("E", windows.E), ("A", windows.A)):
        if b - a < 1:
            raise PeakError(f"{name} window is empty")
    v = np.clip(np.asarray(mv_flow.values, dtype=np.float64), 0.0, None)
    dt_s = mv_flow.dt * 1e-3
    return _trapezoid_window(v, windows.E, dt_s), _trapezoid_window(v, windows.A, dt_s)


def _ratio(num: float, den: float, name: str) -> float:
    if den == 0:
        raise RatioError(f"{name}: zero denominator")
    return float(num / den)


def clinical_ratios(peaks: PeakSet, vols: Optional[tuple] = None, veins: Optional[dict] = None) -> dict:
    """E/A, E_vol/A_vol and S/D per pulmonary vein (``veins`` maps name -> PV PeakSet)."""
    out = {"E/A": _ratio(peaks["E"].value, peaks["A"].value, "E/A")}
    if vols is not None:
        out["E_vol/A_vol"] = _ratio(vols[0], vols[1], "E_vol/A_vol")
    for name, ps in sorted((veins or {}).items()):
        out[f"S/D {name}"] = _ratio(ps["S"].value, ps["D"].value, f"S/D {name}")
    return out
