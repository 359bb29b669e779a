"""VTK XML writers: ImageData per timestep, a .pvd time collection, pathline PolyData.

Arrays go in a single raw appended block, little-endian, each preceded by a
UInt64 byte count, so files open directly in ParaView or any VTK reader.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional
from xml.sax.saxutils import quoteattr

import numpy as np

from .core import GridMeta, ScalarVolume, VelocityField, ensure_dir
from .errors import IoError
from .geometry import PathlineSet, median_filter3

_VTK_TYPES = {
    np.dtype("float32"): "Float32",
    np.dtype("float64"): "Float64",
    np.dtype("uint8"): "UInt8",
    np.dtype("int32"): "Int32",
    np.dtype("int64"): "Int64",
}
FILTERED_NAMES = ("q_criterion",)


def _fmt(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


class _Appended:
    """Collects arrays for the appended block and hands out offsets."""

    def __init__(self):
        self.blocks = []
        self.offset = 0

    def add(self, arr: np.ndarray, name: str, ncomp: int = 1) -> str:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if arr.dtype.base not in _VTK_TYPES:
            raise IoError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw = arr.astype(dt, copy=False).tobytes()
        elem = (f'<DataArray type="{_VTK_TYPES[arr.dtype.base]}" Name={quoteattr(name)} '
                f'NumberOfComponents="{ncomp}" format="appended" offset="{self.offset}"/>')
        self.blocks.append(np.uint64(len(raw)).astype("<u8").tobytes() + raw)
        self.offset += 8 + len(raw)
        return elem

    def payload(self) -> bytes:
        return b"".join(self.blocks)


def _write(path: Path, kind: str, body: str, app: _Appended) -> None:
    head = (f'<?xml version="1.0"?>\n<VTKFile type="{kind}" version="1.0" byte_order="LittleEndian" '
            f'header_type="UInt64">\n')
    try:
        with open(path, "wb") as fh:
            fh.write(head.encode())
            fh.write(body.encode())
            fh.write(b'  <AppendedData encoding="raw">\n   _')
            fh.write(app.payload())
            fh.write(b"\n  </AppendedData>\n</VTKFile>\n")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def write_vti(path, meta: GridMeta, arrays: dict) -> Path:
    """Write one timestep; ``arrays`` maps names to (nz, ny, nx) or (3, nz, ny, nx) arrays."""
    path = Path(path)
    app = _Appended()
    elems = []
    vectors = scalars = None
    for name, a in arrays.items():
        a = np.asarray(a)
        if not np.all(np.isfinite(a)):
            raise IoError(f"array {name!r} has non-finite values")
        if a.shape == (3,) + meta.shape3:
            elems.append(app.add(np.moveaxis(a, 0, -1), name, 3))
            vectors = vectors or name
        elif a.shape == meta.shape3:
            elems.append(app.add(a, name, 1))
            scalars = scalars or name
        else:
            raise IoError(f"array {name!r} has shape {a.shape}, grid is {meta.shape3}")
    ext = f"0 {meta.nx - 1} 0 {meta.ny - 1} 0 {meta.nz - 1}"
    attrs = ""
    if scalars:
        attrs += f" Scalars={quoteattr(scalars)}"
    if vectors:
        attrs += f" Vectors={quoteattr(vectors)}"
    d = np.asarray(meta.direction, dtype=float)
    body = (f'  <ImageData WholeExtent="{ext}" Origin="{_fmt(meta.origin)}" Spacing="{_fmt(meta.spacing)}" '
            f'Direction="{_fmt(d)}">\n'
            f'   <Piece Extent="{ext}">\n'
            f"    <PointData{attrs}>\n"
            + "".join(f"     {e}\n" for e in elems)
            + "    </PointData>\n   </Piece>\n  </ImageData>\n")
    _write(path, "ImageData", body, app)
    return path


def write_pvd(path, files, times_ms) -> Path:
    """Time collection referencing per-timestep files by relative name."""
    path = Path(path)
    rows = "".join(f'    <DataSet timestep="{float(t)!r}" part="0" file={quoteattr(Path(f).name)}/>\n'
                   for f, t in zip(files, times_ms))
    text = ('<?xml version="1.0"?>\n<VTKFile type="Collection" version="1.0" byte_order="LittleEndian">\n'
            f"  <Collection>\n{rows}  </Collection>\n</VTKFile>\n")
    try:
        path.write_text(text)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    return path


def export_vti(obj, path, name: Optional[str] = None, rescale: Optional[float] = None) -> list:
    """Export a velocity field or scalar volume, one .vti per timestep.

    ``path`` is a file stem; timesteps become ``<stem>_<t>.vti`` plus a
    ``<stem>.pvd`` collection, except a single-timestep volume, which is
    written as ``<stem>.vti`` alone. Q-criterion volumes are median filtered
    (3-voxel kernel) before writing. ``rescale`` multiplies the values.
    """
    stem = Path(path)
    if stem.suffix in (".vti", ".pvd"):
        stem = stem.with_suffix("")
    ensure_dir(stem.parent)
    if isinstance(obj, VelocityField):
        meta, data, name = obj.meta, obj.data, name or "velocity"
        frames = [data[:, t] for t in range(meta.nt)]
    elif isinstance(obj, ScalarVolume):
        meta, name = obj.meta, name or obj.name
        vals = obj.values
        if name in FILTERED_NAMES:
            vals = median_filter3(vals).astype(obj.values.dtype)
        frames = [vals[t] for t in range(meta.nt)]
    else:
        raise TypeError("expected VelocityField or ScalarVolume")
    if rescale is not None:
        frames = [(f * rescale).astype(f.dtype) for f in frames]
    if meta.nt == 1:
        return [write_vti(stem.with_suffix(".vti"), meta, {name: frames[0]})]
    width = len(str(meta.nt - 1))
    files = [write_vti(stem.parent / f"{stem.name}_{t:0{width}d}.vti", meta, {name: f}) for t, f in enumerate(frames)]
    pvd = write_pvd(stem.with_suffix(".pvd"), files, np.arange(meta.nt) * meta.dt)
    return files + [pvd]


def write_pathlines_vtp(pathset: PathlineSet, path) -> Path:
    """Pathlines as VTK PolyData lines with per-point time (ms) and speed (m/s)."""
    path = Path(path)
    ensure_dir(path.parent)
    lines = pathset.lines
    pts = np.concatenate([l.points for l in lines]) if lines else np.zeros((0, 3))
    times = np.concatenate([l.times_ms for l in lines]) if lines else np.zeros(0)
    speeds = np.concatenate([l.speeds for l in lines]) if lines else np.zeros(0)
    sizes = np.array([len(l.points) for l in lines], dtype=np.int64)
    offsets = np.cumsum(sizes).astype(np.int64)
    conn = np.arange(len(pts), dtype=np.int64)
    seed = np.concatenate([np.full(len(l.points), l.seed_index, dtype=np.int32) for l in lines]) if lines \
        else np.zeros(0, dtype=np.int32)
    app = _Appended()
    e_pts = app.add(pts.astype(np.float32), "Points", 3)
    e_t = app.add(times.astype(np.float32), "time_ms")
    e_s = app.add(speeds.astype(np.float32), "speed")
    e_id = app.add(seed, "seed")
    e_c = app.add(conn, "connectivity")
    e_o = app.add(offsets, "offsets")
    body = (f'  <PolyData>\n   <Piece NumberOfPoints="{len(pts)}" NumberOfVerts="0" NumberOfLines="{len(lines)}" '
            f'NumberOfStrips="0" NumberOfPolys="0">\n'
            f'    <PointData Scalars="speed">\n     {e_t}\n     {e_s}\n     {e_id}\n    </PointData>\n'
            f"    <Points>\n     {e_pts}\n    </Points>\n"
            f"    <Lines>\n     {e_c}\n     {e_o}\n    </Lines>\n"
            "   </Piece>\n  </PolyData>\n")
    _write(path, "PolyData", body, app)
    return path
