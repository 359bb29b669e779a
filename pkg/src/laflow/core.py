"""Data model, on-disk container, orientation handling and masking.

Arrays follow the container layout: spatial volumes are ``(nz, ny, nx)`` and
time series are ``(nt, nz, ny, nx)`` (x fastest). Velocity is stored as one
``(3, nt, nz, ny, nx)`` float32 block with components along the grid axes;
once the grid is RAS-aligned (identity direction) they are RAS components.
Velocities are m/s, lengths mm, times ms.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, IoError, LabelError, UnsupportedOrientation

LABELS = {"background": 0, "LA": 1, "LV": 2, "aorta": 3}

_F32 = np.dtype("<f4")
_U8 = np.dtype("u1")


@dataclass(frozen=True)
class GridMeta:
    """Voxel grid geometry shared by every array of a dataset.

    ``direction`` is row-major with ITK semantics: column ``c`` is the world
    direction of index axis ``c``; world = origin + D @ (spacing * index).
    """

    dims: tuple  # (nx, ny, nz, nt)
    spacing: tuple = (1.0, 1.0, 1.0)  # mm
    origin: tuple = (0.0, 0.0, 0.0)  # mm
    direction: tuple = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    dt: float = 1.0  # ms
    venc: float = 150.0  # cm/s

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "direction", tuple(float(d) for d in np.ravel(self.direction)))
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise FormatError(f"dims must be 4 positive integers, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise FormatError(f"spacing must be 3 positive values, got {self.spacing}")
        if len(self.origin) != 3:
            raise FormatError("origin must have 3 values")
        if len(self.direction) != 9:
            raise FormatError("direction must have 9 values")
        D = self.direction_matrix
        if np.abs(D.T @ D - np.eye(3)).max() >= 1e-6:
            raise FormatError("direction matrix is not orthonormal")
        if not self.dt > 0 or not self.venc > 0:
            raise FormatError("dt and venc must be positive")

    @property
    def nx(self):
        return self.dims[0]

    @property
    def ny(self):
        return self.dims[1]

    @property
    def nz(self):
        return self.dims[2]

    @property
    def nt(self):
        return self.dims[3]

    @property
    def shape3(self):
        return (self.nz, self.ny, self.nx)

    @property
    def shape4(self):
        return (self.nt, self.nz, self.ny, self.nx)

    @property
    def direction_matrix(self) -> np.ndarray:
        return np.array(self.direction, dtype=float).reshape(3, 3)

    @property
    def spacing_m(self) -> np.ndarray:
        return np.asarray(self.spacing) * 1e-3

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def voxel_volume_m3(self) -> float:
        return self.voxel_volume_mm3 * 1e-9

    @property
    def is_identity_direction(self) -> bool:
        return bool(np.array_equal(self.direction_matrix, np.eye(3)))

    def with_nt(self, nt: int) -> "GridMeta":
        return replace(self, dims=self.dims[:3] + (int(nt),))

    def same_grid(self, other: "GridMeta") -> bool:
        """Spatial grid equality (ignores nt)."""
        return (
            self.dims[:3] == other.dims[:3]
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
            and np.allclose(self.direction, other.direction)
        )

    def index_to_world(self, ijk) -> np.ndarray:
        """Continuous (i, j, k) = (x, y, z) indices -> world mm, shape (..., 3)."""
        ijk = np.asarray(ijk, dtype=float)
        return np.asarray(self.origin) + (ijk * np.asarray(self.spacing)) @ self.direction_matrix.T

    def world_to_index(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        rel = points - np.asarray(self.origin)
        return (rel @ self.direction_matrix) / np.asarray(self.spacing)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (nz, ny, nx, 3)."""
        k, j, i = np.meshgrid(
            np.arange(self.nz), np.arange(self.ny), np.arange(self.nx), indexing="ij"
        )
        return self.index_to_world(np.stack([i, j, k], axis=-1))


@dataclass(frozen=True)
class FluidProps:
    rho: float = 1060.0  # kg/m^3
    mu: float = 0.0035  # Pa s

    def __post_init__(self):
        if not (self.rho > 0 and self.mu > 0):
            raise ValueError("rho and mu must be positive")


@dataclass(frozen=True, eq=False)
class VelocityField:
    meta: GridMeta
    data: np.ndarray  # (3, nt, nz, ny, nx), m/s

    def __post_init__(self):
        expected = (3,) + self.meta.shape4
        if self.data.shape != expected:
            raise FormatError(f"velocity shape {self.data.shape} != {expected}")

    @property
    def vx(self):
        return self.data[0]

    @property
    def vy(self):
        return self.data[1]

    @property
    def vz(self):
        return self.data[2]

    def frame(self, t: int) -> np.ndarray:
        """Velocity at timestep ``t`` as float64, shape (3, nz, ny, nx)."""
        return self.data[:, t].astype(np.float64)

    def max_speed(self) -> float:
        best = 0.0
        for t in range(self.meta.nt):
            f = self.frame(t)
            best = max(best, float(np.sqrt((f * f).sum(axis=0)).max()))
        return best


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    meta: GridMeta
    values: np.ndarray  # (nt, nz, ny, nx)
    unit: str = ""
    name: str = "scalar"

    def __post_init__(self):
        if self.values.shape != self.meta.shape4:
            raise FormatError(f"scalar shape {self.values.shape} != {self.meta.shape4}")


@dataclass(frozen=True, eq=False)
class Mask:
    meta: GridMeta  # nt == 1
    labels: np.ndarray  # (nz, ny, nx) integer

    def __post_init__(self):
        if self.labels.shape != self.meta.shape3:
            raise FormatError(f"mask shape {self.labels.shape} != {self.meta.shape3}")

    def region(self, label) -> np.ndarray:
        """Boolean voxel set for one label (or an iterable of labels)."""
        items = [label] if isinstance(label, (str, int, np.integer)) else list(label)
        out = np.isin(self.labels, [resolve_label(l) for l in items])
        if not out.any():
            raise LabelError(f"label {label!r} has no voxels")
        return out

    @property
    def present_labels(self) -> list:
        return sorted(int(v) for v in np.unique(self.labels) if v != 0)


@dataclass(frozen=True, eq=False)
class Dataset:
    velocity: VelocityField
    magnitude: ScalarVolume
    mask: Optional[Mask] = None
    fluid: FluidProps = field(default_factory=FluidProps)

    def __post_init__(self):
        m = self.velocity.meta
        if not m.same_grid(self.magnitude.meta) or m.nt != self.magnitude.meta.nt:
            raise FormatError("velocity and magnitude grids differ")
        if self.mask is not None and not m.same_grid(self.mask.meta):
            raise FormatError("mask grid differs from velocity grid")

    @property
    def meta(self) -> GridMeta:
        return self.velocity.meta


def resolve_label(label) -> int:
    if isinstance(label, str):
        if label in LABELS:
            return LABELS[label]
        try:
            return int(label)
        except ValueError:
            raise LabelError(f"unknown label name {label!r}") from None
    return int(label)


# --------------------------------------------------------------------------
# container IO


def _meta_to_header(meta: GridMeta) -> dict:
    return {
        "dims": list(meta.dims),
        "spacing_mm": list(meta.spacing),
        "origin_mm": list(meta.origin),
        "direction": list(meta.direction),
        "dt_ms": meta.dt,
        "venc_cm_s": meta.venc,
    }


def _header_to_meta(h: dict) -> GridMeta:
    try:
        return GridMeta(
            dims=h["dims"],
            spacing=h["spacing_mm"],
            origin=h.get("origin_mm", (0.0, 0.0, 0.0)),
            direction=h.get("direction", GridMeta.direction),
            dt=h.get("dt_ms", 1.0),
            venc=h.get("venc_cm_s", 150.0),
        )
    except KeyError as exc:
        raise FormatError(f"header missing field {exc}") from None


def _read_header(path: Path) -> dict:
    hp = path / "header.json"
    if not hp.is_file():
        raise IoError(f"missing {hp}")
    try:
        return json.loads(hp.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header.json: {exc}") from None


def _read_array(path: Path, spec: dict, count: int, expect_dtype: str) -> np.ndarray:
    if not isinstance(spec, dict) or "filename" not in spec:
        raise FormatError(f"array entry must carry a filename: {spec!r}")
    dtype_name = spec.get("dtype", expect_dtype)
    if dtype_name != expect_dtype:
        raise FormatError(f"unsupported dtype {dtype_name!r}, expected {expect_dtype!r}")
    dtype = _F32 if expect_dtype == "f32le" else _U8
    fp = path / spec["filename"]
    if not fp.is_file():
        raise IoError(f"missing array file {fp}")
    nbytes = fp.stat().st_size
    if nbytes != count * dtype.itemsize:
        raise FormatError(
            f"{fp.name}: {nbytes} bytes, expected {count * dtype.itemsize} ({count} x {dtype.itemsize})"
        )
    return np.fromfile(fp, dtype=dtype)


def _write_array(fp: Path, arr: np.ndarray, dtype) -> None:
    np.ascontiguousarray(arr, dtype=dtype).tofile(fp)


def load_dataset(path) -> Dataset:
    """Read a dataset container directory (``header.json`` plus raw arrays)."""
    path = Path(path)
    h = _read_header(path)
    meta = _header_to_meta(h)
    arrays = h.get("arrays")
    if not isinstance(arrays, dict):
        raise FormatError("header has no 'arrays' table")
    n4 = int(np.prod(meta.shape4))
    comps = []
    for key in ("vx", "vy", "vz"):
        if key not in arrays:
            raise FormatError(f"header arrays missing {key!r}")
        comps.append(_read_array(path, arrays[key], n4, "f32le").reshape(meta.shape4))
    unit = h.get("velocity_unit", "m/s")
    data = np.stack(comps)
    if unit == "cm/s":
        data = (data * np.float32(0.01)).astype(np.float32)
    elif unit != "m/s":
        raise FormatError(f"unsupported velocity_unit {unit!r}")
    if "mag" in arrays:
        mag = _read_array(path, arrays["mag"], n4, "f32le").reshape(meta.shape4)
    else:
        mag = np.ones(meta.shape4, dtype=np.float32)
    mask = None
    if h.get("mask"):
        labels = _read_array(path, h["mask"], int(np.prod(meta.shape3)), "u8").reshape(meta.shape3)
        mask = Mask(meta.with_nt(1), labels)
    fl = h.get("fluid", {})
    fluid = FluidProps(rho=fl.get("rho", FluidProps.rho), mu=fl.get("mu", FluidProps.mu))
    return Dataset(VelocityField(meta, data), ScalarVolume(meta, mag, "a.u.", "magnitude"), mask, fluid)


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as a container directory; velocities are stored in m/s."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        h = _meta_to_header(ds.meta)
        h["velocity_unit"] = "m/s"
        h["arrays"] = {}
        for i, key in enumerate(("vx", "vy", "vz")):
            fn = f"{key}.f32"
            _write_array(path / fn, ds.velocity.data[i], _F32)
            h["arrays"][key] = {"filename": fn, "dtype": "f32le"}
        _write_array(path / "mag.f32", ds.magnitude.values, _F32)
        h["arrays"]["mag"] = {"filename": "mag.f32", "dtype": "f32le"}
        if ds.mask is not None:
            _write_array(path / "mask.u8", ds.mask.labels, _U8)
            h["mask"] = {"filename": "mask.u8", "dtype": "u8"}
        h["fluid"] = {"rho": ds.fluid.rho, "mu": ds.fluid.mu}
        (path / "header.json").write_text(json.dumps(h, indent=2) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def save_scalar_volume(vol: ScalarVolume, path) -> None:
    """Single-array container: same header layout, one ``values`` array."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        h = _meta_to_header(vol.meta)
        h["kind"] = "scalar"
        h["name"] = vol.name
        h["unit"] = vol.unit
        h["arrays"] = {"values": {"filename": "values.f32", "dtype": "f32le"}}
        _write_array(path / "values.f32", vol.values, _F32)
        (path / "header.json").write_text(json.dumps(h, indent=2) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_scalar_volume(path) -> ScalarVolume:
    path = Path(path)
    h = _read_header(path)
    meta = _header_to_meta(h)
    try:
        spec = h["arrays"]["values"]
    except (KeyError, TypeError):
        raise FormatError("scalar container needs arrays.values") from None
    vals = _read_array(path, spec, int(np.prod(meta.shape4)), "f32le").reshape(meta.shape4)
    return ScalarVolume(meta, vals, h.get("unit", ""), h.get("name", "scalar"))


def is_scalar_container(path) -> bool:
    try:
        return _read_header(Path(path)).get("kind") == "scalar"
    except (IoError, FormatError):
        return False


# --------------------------------------------------------------------------
# orientation and masking


def _axis_permutation(D: np.ndarray):
    """For a signed permutation D return, per index axis, (world axis, sign)."""
    if not np.all(np.isin(np.round(D, 9), (-1.0, 0.0, 1.0))) or not np.allclose(
        np.abs(D).sum(axis=0), 1.0
    ):
        raise UnsupportedOrientation(
            "direction is not a signed axis permutation; oblique grids need resampling"
        )
    world_of = [int(np.argmax(np.abs(D[:, c]))) for c in range(3)]
    if sorted(world_of) != [0, 1, 2]:
        raise UnsupportedOrientation("direction does not map axes one-to-one")
    signs = [int(np.sign(D[world_of[c], c])) for c in range(3)]
    return world_of, signs


def _reorient_spatial(arr: np.ndarray, world_of, signs, lead: int) -> np.ndarray:
    """Permute/flip the trailing (z, y, x) axes of ``arr`` into RAS order."""
    # array axis for index axis c is lead + (2 - c)
    out = arr
    for c in range(3):
        if signs[c] < 0:
            out = np.flip(out, axis=lead + 2 - c)
    # new array axis for world axis w is lead + (2 - w); it takes index axis c with world_of[c] == w
    src_for_world = {w: c for c, w in enumerate(world_of)}
    order = list(range(lead)) + [lead + 2 - src_for_world[w] for w in (2, 1, 0)]
    return np.ascontiguousarray(np.transpose(out, order))


def reorient_to_ras(ds: Dataset) -> Dataset:
    """Permute/flip voxel data so the grid axes are RAS and direction is identity.

    Velocity components are rotated with the grid, so the physical vector at
    each point is unchanged. Only signed axis permutations are supported.
    """
    meta = ds.meta
    D = meta.direction_matrix
    if np.array_equal(D, np.eye(3)):
        return ds
    world_of, signs = _axis_permutation(D)
    n_idx = (meta.nx, meta.ny, meta.nz)
    new_n = [0, 0, 0]
    new_sp = [0.0, 0.0, 0.0]
    for c in range(3):
        new_n[world_of[c]] = n_idx[c]
        new_sp[world_of[c]] = meta.spacing[c]
    # world position of the new index origin: the corner where every flipped axis is at its max
    corner = [(n_idx[c] - 1) if signs[c] < 0 else 0 for c in range(3)]
    new_origin = meta.index_to_world(np.array(corner, dtype=float))
    new_meta = GridMeta(
        dims=tuple(new_n) + (meta.nt,),
        spacing=tuple(new_sp),
        origin=tuple(new_origin),
        direction=np.eye(3).ravel(),
        dt=meta.dt,
        venc=meta.venc,
    )
    vdata = _reorient_spatial(ds.velocity.data, world_of, signs, lead=2)
    rotated = np.empty_like(vdata)
    for c in range(3):
        comp = vdata[c] if signs[c] > 0 else -vdata[c]
        rotated[world_of[c]] = comp
    mag = _reorient_spatial(ds.magnitude.values, world_of, signs, lead=1)
    mask = None
    if ds.mask is not None:
        mask = Mask(new_meta.with_nt(1), _reorient_spatial(ds.mask.labels, world_of, signs, lead=0))
    return Dataset(
        VelocityField(new_meta, rotated),
        ScalarVolume(new_meta, mag, ds.magnitude.unit, ds.magnitude.name),
        mask,
        ds.fluid,
    )


def apply_mask(vel: VelocityField, mask: Mask, label) -> VelocityField:
    """Zero velocities outside ``label``; values inside are untouched."""
    if not vel.meta.same_grid(mask.meta):
        raise FormatError("mask grid differs from velocity grid")
    region = mask.region(label)
    data = np.where(region[None, None], vel.data, np.float32(0.0)).astype(np.float32)
    return VelocityField(vel.meta, data)


def check_venc(vel: VelocityField) -> None:
    """Raise FormatError if any speed exceeds twice the encoding velocity."""
    limit = 2.0 * vel.meta.venc / 100.0
    if vel.max_speed() > limit * (1 + 1e-6):
        raise FormatError(f"speed exceeds 2*venc ({limit:.3f} m/s)")


def mask_from_region(meta: GridMeta, region: np.ndarray, label: int = 1) -> Mask:
    return Mask(meta.with_nt(1), np.where(region, label, 0).astype(np.uint8))


def as_points(points: Sequence) -> np.ndarray:
    return np.atleast_2d(np.asarray(points, dtype=float))


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise IoError(f"{p} is not writable")
    return p
