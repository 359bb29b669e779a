"""Measurement geometry: probe spheres, flow-oriented cross-sections,
voxel volumes, median filtering and pathline tracing.

All positions are world millimetres; the helpers convert to continuous
voxel indices through :class:`~laflow.core.GridMeta`.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import GridMeta, Mask, ScalarVolume, VelocityField, as_points
from .errors import AmbiguousDirection, GeometryError, OpenSectionWarning, ParamError

log = logging.getLogger(__name__)

PROBE_ROLES = ("valve", "vein", "custom")


# --------------------------------------------------------------------------
# sampling helpers


def _index_coords(meta: GridMeta, points: np.ndarray) -> np.ndarray:
    """World points (n, 3) -> map_coordinates order (z, y, x), shape (3, n)."""
    ijk = meta.world_to_index(points)
    return ijk[:, ::-1].T


def interpolate(volume: np.ndarray, meta: GridMeta, points, support: Optional[np.ndarray] = None):
    """Trilinear interpolation of a (nz, ny, nx) or (c, nz, ny, nx) array.

    With ``support``, corners outside the support are dropped and the weights
    renormalised, so values from outside a vessel never bleed in. Points with
    no support corner get 0.
    """
    points = as_points(points)
    coords = _index_coords(meta, points)
    vols = volume[None] if volume.ndim == 3 else volume
    if support is None:
        out = np.stack(
            [ndimage.map_coordinates(v, coords, order=1, mode="grid-constant", cval=0.0, output=np.float64) for v in vols]
        )
    else:
        w = ndimage.map_coordinates(support.astype(np.float64), coords, order=1, mode="grid-constant", cval=0.0)
        num = np.stack(
            [
                ndimage.map_coordinates(np.where(support, v, 0.0), coords, order=1, mode="grid-constant", cval=0.0,
                                        output=np.float64)
                for v in vols
            ]
        )
        ok = w > 1e-12
        out = np.where(ok, num / np.where(ok, w, 1.0), 0.0)
    return out[0] if volume.ndim == 3 else out


def nearest_inside(region: np.ndarray, meta: GridMeta, points) -> np.ndarray:
    """True where the voxel nearest to each point belongs to ``region``."""
    points = as_points(points)
    ijk = np.rint(meta.world_to_index(points)).astype(np.int64)
    n = np.array([meta.nx, meta.ny, meta.nz])
    inb = np.all((ijk >= 0) & (ijk < n), axis=1)
    out = np.zeros(len(points), dtype=bool)
    idx = ijk[inb]
    out[inb] = region[idx[:, 2], idx[:, 1], idx[:, 0]]
    return out


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise GeometryError("zero-length direction")
    return v / n


def plane_basis(normal) -> tuple:
    """Two unit vectors (u, w) with (u, w, normal) right-handed orthonormal."""
    n = _unit(normal)
    helper = np.eye(3)[int(np.argmin(np.abs(n)))]
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    return u, w


# --------------------------------------------------------------------------
# probes


@dataclass(frozen=True)
class Probe:
    name: str
    center: tuple  # mm
    diameter: float = 6.0  # mm
    role: str = "custom"
    direction: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.center) != 3:
            raise ParamError(f"probe {self.name}: center needs 3 coordinates")
        if not self.diameter > 0:
            raise ParamError(f"probe {self.name}: diameter must be positive")
        if self.role not in PROBE_ROLES:
            raise ParamError(f"probe {self.name}: role must be one of {PROBE_ROLES}")
        if self.direction is not None:
            object.__setattr__(self, "direction", tuple(_unit(self.direction)))

    def with_direction(self, direction) -> "Probe":
        return replace(self, direction=tuple(_unit(direction)))

    @classmethod
    def from_dict(cls, d: dict) -> "Probe":
        return cls(
            name=d["name"],
            center=d["center_mm"],
            diameter=d.get("diameter_mm", 6.0),
            role=d.get("role", "custom"),
            direction=d.get("direction"),
        )

    def to_dict(self) -> dict:
        out = {"name": self.name, "center_mm": list(self.center), "diameter_mm": self.diameter, "role": self.role}
        if self.direction is not None:
            out["direction"] = list(self.direction)
        return out


def sphere_region(meta: GridMeta, center, diameter: float, support: Optional[np.ndarray] = None) -> np.ndarray:
    """Voxels whose centers lie within the sphere (and within ``support``)."""
    r = diameter / 2.0
    c = np.asarray(center, dtype=float)
    # bounding box in index space keeps this cheap on large grids
    lo = np.floor(meta.world_to_index(c[None])[0] - r / np.min(meta.spacing) - 1).astype(int)
    hi = np.ceil(meta.world_to_index(c[None])[0] + r / np.min(meta.spacing) + 1).astype(int)
    if not meta.is_identity_direction:
        lo[:] = 0
        hi[:] = (meta.nx - 1, meta.ny - 1, meta.nz - 1)
    lo = np.clip(lo, 0, [meta.nx - 1, meta.ny - 1, meta.nz - 1])
    hi = np.clip(hi, 0, [meta.nx - 1, meta.ny - 1, meta.nz - 1])
    out = np.zeros(meta.shape3, dtype=bool)
    k, j, i = np.meshgrid(
        np.arange(lo[2], hi[2] + 1), np.arange(lo[1], hi[1] + 1), np.arange(lo[0], hi[0] + 1), indexing="ij"
    )
    pts = meta.index_to_world(np.stack([i, j, k], axis=-1))
    inside = ((pts - c) ** 2).sum(axis=-1) <= r * r + 1e-9
    out[k[inside], j[inside], i[inside]] = True
    if support is not None:
        out &= support
    return out


# --------------------------------------------------------------------------
# cross-sections


@dataclass(frozen=True, eq=False)
class SectionGrid:
    meta: GridMeta
    origin: np.ndarray  # mm
    normal: np.ndarray
    u: np.ndarray
    w: np.ndarray
    points: np.ndarray  # (n, 3) mm
    area_element: float  # mm^2
    support: Optional[np.ndarray] = None
    open: bool = False
    plane_coords: Optional[np.ndarray] = None  # (n, 2) integer raster indices

    @property
    def n_samples(self) -> int:
        return len(self.points)

    @property
    def area(self) -> float:
        """Patch area in mm^2."""
        return self.n_samples * self.area_element

    def flipped(self) -> "SectionGrid":
        return replace(self, normal=-self.normal, w=-self.w)


def extract_section(mask: Mask, label, probe: Probe, step: Optional[float] = None,
                    radius: Optional[float] = None) -> SectionGrid:
    """Rasterise the plane through ``probe.center`` normal to its direction.

    The raster step defaults to half the smallest voxel spacing. Samples are
    offset by half a step from the origin, so for axis-aligned planes every
    voxel of the cut receives whole samples. The kept patch is the 4-connected
    set of in-mask samples around the origin.
    """
    if probe.direction is None:
        raise GeometryError(f"probe {probe.name}: direction not derived")
    meta = mask.meta
    region = mask.region(label)
    center = np.asarray(probe.center, dtype=float)
    if not nearest_inside(region, meta, center[None])[0]:
        raise GeometryError(f"probe {probe.name}: center lies outside label {label!r}")
    h = step if step is not None else 0.5 * min(meta.spacing)
    n = _unit(probe.direction)
    u, w = plane_basis(n)
    if radius is None:
        ext = np.asarray(meta.spacing) * np.asarray([meta.nx, meta.ny, meta.nz])
        radius = float(np.linalg.norm(ext))
    half = int(np.ceil(radius / h)) + 1
    k = np.arange(-half, half) + 0.5
    a, b = np.meshgrid(k, k, indexing="ij")
    pts = center + h * (a[..., None] * u + b[..., None] * w)
    flat = pts.reshape(-1, 3)
    inside = nearest_inside(region, meta, flat).reshape(a.shape)
    lab, _ = ndimage.label(inside)  # default structure = 4-connectivity in 2D
    seeds = lab[half - 1: half + 1, half - 1: half + 1]
    keep_labels = np.unique(seeds[seeds > 0])
    if keep_labels.size == 0:
        raise GeometryError(f"probe {probe.name}: plane has no in-mask samples at the center")
    patch = np.isin(lab, keep_labels)

    ijk = meta.world_to_index(flat).reshape(a.shape + (3,))
    nvec = np.array([meta.nx, meta.ny, meta.nz])
    in_grid = np.all((ijk >= -0.5) & (ijk < nvec - 0.5), axis=-1)
    border = np.zeros_like(patch)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    is_open = bool((patch & border).any() or (ndimage.binary_dilation(patch) & ~in_grid).any())
    if is_open:
        warnings.warn(f"section of probe {probe.name} is not closed by the mask", OpenSectionWarning, stacklevel=2)
    ia, ib = np.nonzero(patch)
    return SectionGrid(
        meta=meta,
        origin=center,
        normal=n,
        u=u,
        w=w,
        points=pts[ia, ib],
        area_element=h * h,
        support=region,
        open=is_open,
        plane_coords=np.stack([ia, ib], axis=1),
    )


def derive_direction(vel: VelocityField, region, k: int = 5, support: Optional[np.ndarray] = None) -> np.ndarray:
    """Unit flow direction from the ``k`` timesteps of highest mean speed.

    ``region`` is a boolean voxel set (e.g. a probe sphere within the mask)
    or a :class:`SectionGrid`. Per timestep the mean velocity vector and the
    mean speed over the region are formed; timesteps are ranked by speed
    (descending, ties to the earlier timestep), and the mean vectors of the
    top ``k`` are averaged and normalised.
    """
    nt = vel.meta.nt
    if k < 1:
        raise ParamError("k must be >= 1")
    k = min(k, nt)
    means = np.empty((nt, 3))
    speeds = np.empty(nt)
    if isinstance(region, SectionGrid):
        sup = region.support if support is None else support
        for t in range(nt):
            v = interpolate(vel.frame(t), vel.meta, region.points, sup)
            means[t] = v.mean(axis=1)
            speeds[t] = np.sqrt((v * v).sum(axis=0)).mean()
    else:
        region = np.asarray(region, dtype=bool)
        if not region.any():
            raise GeometryError("region is empty")
        for t in range(nt):
            v = vel.data[:, t][:, region].astype(np.float64)
            means[t] = v.mean(axis=1)
            speeds[t] = np.sqrt((v * v).sum(axis=0)).mean()
    order = np.argsort(-speeds, kind="stable")[:k]
    avg = means[order].mean(axis=0)
    norm = np.linalg.norm(avg)
    if norm < 1e-3:
        raise AmbiguousDirection(f"averaged flow vector too weak ({norm:.2e} m/s)")
    return avg / norm


def orient_probe(vel: VelocityField, mask: Mask, label, probe: Probe, k: int = 5) -> Probe:
    """Derive a probe's direction from the flow inside its sphere."""
    support = mask.region(label)
    sph = sphere_region(vel.meta, probe.center, probe.diameter, support)
    if not sph.any():
        raise GeometryError(f"probe {probe.name}: sphere misses label {label!r}")
    return probe.with_direction(derive_direction(vel, sph, k))


# --------------------------------------------------------------------------
# volumes


def mask_volume(mask: Mask, label) -> float:
    """Label volume in ml."""
    count = int(mask.region(label).sum())
    return count * mask.meta.voxel_volume_mm3 / 1000.0


def bsa_dubois(weight: float, height: float) -> float:
    """Body surface area (m^2) from weight (kg) and height (cm)."""
    if not (weight > 0 and height > 0):
        raise ParamError("weight and height must be positive")
    return 0.007184 * height**0.725 * weight**0.425


def index_by_bsa(volume: float, weight: float, height: float) -> float:
    return volume / bsa_dubois(weight, height)


# --------------------------------------------------------------------------
# filtering


def _median3(vol: np.ndarray) -> np.ndarray:
    out = ndimage.median_filter(vol, size=3, mode="nearest")
    if min(vol.shape) < 3:
        shell = np.ones(vol.shape, dtype=bool)
    else:
        shell = np.ones(vol.shape, dtype=bool)
        shell[1:-1, 1:-1, 1:-1] = False
    # boundary voxels: median over in-bounds neighbours only; an even count
    # takes the upper middle element so the output stays within the input values
    padded = np.pad(vol.astype(np.float64), 1, constant_values=np.nan)
    idx = np.argwhere(shell)
    offs = np.array([(a, b, c) for a in range(3) for b in range(3) for c in range(3)])
    nb = np.sort(padded[idx[:, None, 0] + offs[:, 0], idx[:, None, 1] + offs[:, 1], idx[:, None, 2] + offs[:, 2]],
                 axis=1)  # NaNs sort last
    count = np.sum(~np.isnan(nb), axis=1)
    out = out.astype(np.float64) if out.dtype != np.float64 else out
    out[shell] = nb[np.arange(len(nb)), count // 2]
    return out


def median_filter3(v):
    """3x3x3 median filter applied per timestep.

    Accepts a :class:`ScalarVolume` or a plain (nz, ny, nx) / (nt, nz, ny, nx)
    array and returns the same kind.
    """
    if isinstance(v, ScalarVolume):
        vals = np.stack([_median3(v.values[t]) for t in range(v.meta.nt)]).astype(v.values.dtype)
        return ScalarVolume(v.meta, vals, v.unit, v.name)
    arr = np.asarray(v)
    if arr.ndim == 3:
        return _median3(arr).astype(np.result_type(arr.dtype, np.float64))
    return np.stack([_median3(a) for a in arr])


# --------------------------------------------------------------------------
# pathlines


@dataclass(frozen=True, eq=False)
class Pathline:
    seed_index: int
    emission: int  # timestep index
    points: np.ndarray  # (m, 3) mm, one per elapsed timestep
    times_ms: np.ndarray
    speeds: np.ndarray  # m/s at each point


@dataclass(frozen=True, eq=False)
class PathlineSet:
    lines: list = field(default_factory=list)
    skipped: int = 0


def trace_pathlines(vel: VelocityField, seeds: Sequence, window: int = 6, support: Optional[np.ndarray] = None,
                    emissions: Optional[Sequence[int]] = None, substeps: int = 4) -> PathlineSet:
    """Integrate particles through the periodic, time-varying field.

    Each seed is released at every timestep in ``emissions`` (default: all)
    and advected for ``window`` timesteps with classical RK4 at ``dt /
    substeps``, trilinear in space and linear in time. A particle stops at
    the last position before it leaves ``support``. Lines are ordered by
    (seed index, emission timestep).
    """
    meta = vel.meta
    nt = meta.nt
    seeds = as_points(seeds)
    if support is None:
        support = np.ones(meta.shape3, dtype=bool)
    ok = nearest_inside(support, meta, seeds)
    skipped = int((~ok).sum())
    if skipped:
        warnings.warn(f"{skipped} seed(s) outside the mask were skipped", stacklevel=2)
    emissions = list(range(nt)) if emissions is None else [int(e) % nt for e in emissions]
    seed_ids = np.nonzero(ok)[0]
    if seed_ids.size == 0 or not emissions:
        return PathlineSet([], skipped)

    frames = [vel.data[:, t] for t in range(nt)]
    cache = {}

    def frame_velocity(t, pts):
        key = t % nt
        if key not in cache:
            cache[key] = np.where(support[None], frames[key], 0).astype(np.float64)
        return interpolate(cache[key], meta, pts, support)

    def velocity(tau, pts):
        # tau in timestep units; periodic linear blend of neighbouring frames
        t0 = int(np.floor(tau + 1e-12))
        frac = tau - t0
        v0 = frame_velocity(t0, pts)
        if frac < 1e-12:
            return v0.T
        v1 = frame_velocity(t0 + 1, pts)
        return ((1.0 - frac) * v0 + frac * v1).T

    lines = []
    dt = meta.dt  # ms; v [m/s] == [mm/ms]
    hsub = 1.0 / substeps
    for e in emissions:
        pos = seeds[seed_ids].copy()
        alive = np.ones(len(pos), dtype=bool)
        completed = np.zeros(len(pos), dtype=int)  # full timesteps survived
        track = [pos.copy()]
        spd = [np.linalg.norm(velocity(float(e), pos), axis=1)]
        tau = float(e)
        for step in range(window):
            for _ in range(substeps):
                if not alive.any():
                    break
                idx = np.nonzero(alive)[0]
                p = pos[idx]
                k1 = velocity(tau, p)
                k2 = velocity(tau + 0.5 * hsub, p + 0.5 * hsub * dt * k1)
                k3 = velocity(tau + 0.5 * hsub, p + 0.5 * hsub * dt * k2)
                k4 = velocity(tau + hsub, p + hsub * dt * k3)
                newp = p + (hsub * dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
                inside = nearest_inside(support, meta, newp)
                pos[idx[inside]] = newp[inside]
                alive[idx[~inside]] = False
                tau += hsub
            tau = float(e + step + 1)
            completed[alive] = step + 1
            track.append(pos.copy())
            spd.append(np.linalg.norm(velocity(tau, pos), axis=1))
            if not alive.any():
                break
        track = np.stack(track)
        spd = np.stack(spd)
        for j, sid in enumerate(seed_ids):
            m = completed[j] + 1
            lines.append(
                Pathline(
                    seed_index=int(sid),
                    emission=int(e),
                    points=track[:m, j],
                    times_ms=(e + np.arange(m)) * dt,
                    speeds=spd[:m, j],
                )
            )
    lines.sort(key=lambda l: (l.seed_index, l.emission))
    return PathlineSet(lines, skipped)
