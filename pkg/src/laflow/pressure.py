"""Virtual work-energy relative pressure between two planes.

A steady auxiliary field ``w`` is built as the gradient of a discrete
potential on the flow domain: unit flux enters over the inlet section,
leaves over the outlet section, and walls carry no flux. Dotting the
momentum equation with ``w`` and integrating over the domain gives

    q_w * dp = d/dt int(rho v.w) + int(rho (v.grad v).w) - int(mu lap(v).w)

where ``dp`` is inlet minus outlet pressure. The viscous term is kept in
volume form: with a slip-wall virtual field the strain-rate form
``mu/2 int (grad v + grad v^T):(grad w + grad w^T)`` drops the wall shear
entirely, so it cannot recover Poiseuille losses in a straight duct.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .core import FluidProps, GridMeta, Mask, VelocityField
from .errors import GeometryError, SolverError, TopologyError, WindowError
from .geometry import SectionGrid
from .metrics import Stencil, TimeTrace, _shift

log = logging.getLogger(__name__)

MMHG = 133.322  # Pa per mmHg


@dataclass(frozen=True, eq=False)
class VirtualField:
    meta: GridMeta
    w: np.ndarray  # (3, nz, ny, nx), 1/m^2 per unit flux
    support: np.ndarray  # connected flow domain used for the solve
    q_w: float
    iterations: int
    residual: float
    divergence: float  # max |div w| / (mean |w| / h) over non-source voxels
    inlet_voxels: int
    outlet_voxels: int

    def scaled(self, c: float) -> "VirtualField":
        return VirtualField(self.meta, self.w * c, self.support, self.q_w * c, self.iterations, self.residual,
                            self.divergence, self.inlet_voxels, self.outlet_voxels)

    @property
    def stats(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual, "divergence": self.divergence}


@dataclass(frozen=True, eq=False)
class PressureTrace(TimeTrace):
    """Relative pressure in mmHg; positive when the inlet side is higher."""

    terms: dict = field(default_factory=dict)  # per-term contributions, mmHg


def conjugate_gradient(A, b: np.ndarray, tol: float = 1e-8, maxiter: int = 20000, singular: bool = False):
    """Jacobi-preconditioned CG; returns ``(x, iterations, relative residual)``.

    With ``singular`` the constant null space of a pure-Neumann operator is
    projected out of the right-hand side and the iterates.
    """
    b = np.asarray(b, dtype=np.float64)
    if singular:
        b = b - b.mean()
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0:
        return x, 0, 0.0
    dinv = 1.0 / A.diagonal()
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    rel = 1.0
    for k in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            break
        z = dinv * r
        if singular:
            z -= z.mean()
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        raise SolverError(f"CG did not converge in {maxiter} iterations (residual {rel:.2e})",
                          {"iterations": maxiter, "residual": rel})
    if singular:
        x -= x.mean()
    return x, k, rel


def _section_weights(section: SectionGrid, region: np.ndarray, meta: GridMeta) -> dict:
    """Map section samples to their nearest in-region voxels; weight = area."""
    ijk = np.rint(meta.world_to_index(section.points)).astype(np.int64)
    n = np.array([meta.nx, meta.ny, meta.nz])
    ok = np.all((ijk >= 0) & (ijk < n), axis=1)
    ijk = ijk[ok]
    ok2 = region[ijk[:, 2], ijk[:, 1], ijk[:, 0]]
    ijk = ijk[ok2]
    flat = np.ravel_multi_index((ijk[:, 2], ijk[:, 1], ijk[:, 0]), meta.shape3)
    uniq, counts = np.unique(flat, return_counts=True)
    return dict(zip(uniq.tolist(), (counts * section.area_element).tolist()))


def _laplacian_matrix(index: np.ndarray, spacing_m) -> sp.csr_matrix:
    """Symmetric positive semidefinite face-flux operator on labelled voxels."""
    n = int(index.max()) + 1
    hx, hy, hz = spacing_m
    vol = hx * hy * hz
    rows, cols, vals = [], [], []
    for c, h in enumerate((hx, hy, hz)):
        ax = 2 - c
        a = vol / (h * h)  # face area / h
        lo = np.take(index, range(index.shape[ax] - 1), axis=ax)
        hi = np.take(index, range(1, index.shape[ax]), axis=ax)
        ok = (lo >= 0) & (hi >= 0)
        rows.append(lo[ok])
        cols.append(hi[ok])
        vals.append(np.full(int(ok.sum()), -a))
    r = np.concatenate(rows)
    c_ = np.concatenate(cols)
    v = np.concatenate(vals)
    off = sp.coo_matrix((v, (r, c_)), shape=(n, n))
    off = (off + off.T).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


def virtual_field(mask: Mask, labels, inlet: SectionGrid, outlet: SectionGrid, tol: float = 1e-8,
                  maxiter: int = 20000) -> VirtualField:
    """Potential-flow virtual field carrying unit flux from inlet to outlet."""
    meta = mask.meta
    region = mask.region(labels)
    win = _section_weights(inlet, region, meta)
    wout = _section_weights(outlet, region, meta)
    if not win or not wout:
        raise TopologyError("inlet or outlet section does not intersect the flow domain")
    if set(win) & set(wout):
        raise TopologyError("inlet and outlet sections share voxels (zero-length path)")
    comp, _ = ndimage.label(region)  # 6-connectivity
    flat = comp.ravel()
    cin = {int(flat[i]) for i in win}
    cout = {int(flat[i]) for i in wout}
    common = cin & cout
    if not common:
        raise TopologyError("inlet and outlet are not connected through the mask")
    support = np.isin(comp, list(common))
    index = -np.ones(meta.shape3, dtype=np.int64)
    index[support] = np.arange(int(support.sum()))
    spacing_m = meta.spacing_m
    A = _laplacian_matrix(index, spacing_m)
    b = np.zeros(A.shape[0])
    iflat = index.ravel()
    sin = sum(win.values())
    sout = sum(wout.values())
    src = np.zeros(A.shape[0], dtype=bool)
    for i, wgt in win.items():
        if iflat[i] >= 0:
            b[iflat[i]] += wgt / sin
            src[iflat[i]] = True
    for i, wgt in wout.items():
        if iflat[i] >= 0:
            b[iflat[i]] -= wgt / sout
            src[iflat[i]] = True
    phi, its, res = conjugate_gradient(A, b, tol=tol, maxiter=maxiter, singular=True)
    log.debug("virtual field: %d unknowns, %d CG iterations, residual %.2e", A.shape[0], its, res)

    P = np.zeros(meta.shape3)
    P[support] = phi
    w = np.zeros((3,) + meta.shape3)
    for c in range(3):
        ax = 2 - c
        h = spacing_m[c]
        up = support & _shift(support, ax, +1, False)
        face = np.where(up, (P - _shift(P, ax, +1)) / h, 0.0)  # face i+1/2, flow towards +axis
        w[c] = 0.5 * (face + _shift(face, ax, -1))
    w[:, ~support] = 0.0

    resid = (A @ phi - b)[~src]
    vol = meta.voxel_volume_m3
    mean_w = float(np.sqrt((w * w).sum(axis=0))[support].mean())
    hmin = float(min(spacing_m))
    div = float(np.abs(resid).max() / vol / (mean_w / hmin)) if resid.size and mean_w > 0 else 0.0
    return VirtualField(meta, w, support, 1.0, its, res, div, len(win), len(wout))


def fv_laplacian(f: np.ndarray, region: np.ndarray, spacing_m) -> np.ndarray:
    """Finite-volume Laplacian of a scalar field restricted to ``region``.

    Interior faces use two-point differences. On faces leading out of the
    region the normal derivative is extrapolated from inside (second order
    when two inward neighbours exist), so a field that is smooth up to the
    wall keeps its wall shear.
    """
    f = np.where(region, f, 0.0)
    out = np.zeros_like(f)
    for c in range(3):
        ax = 2 - c
        h = spacing_m[c]
        for s in (+1, -1):
            nb = region & _shift(region, ax, s, False)
            d_in = (_shift(f, ax, s) - f) / h
            b1 = region & _shift(region, ax, -s, False)
            b2 = b1 & _shift(region, ax, -2 * s, False)
            f1 = _shift(f, ax, -s)
            f2 = _shift(f, ax, -2 * s)
            d_ex = np.where(b2, (2 * f - 3 * f1 + f2) / h, np.where(b1, (f - f1) / h, 0.0))
            out += np.where(nb, d_in, d_ex) / h
    out[~region] = 0.0
    return out


def vwerp_trace(vel: VelocityField, vf: VirtualField, fluid: FluidProps = FluidProps(),
                viscous: str = "laplacian") -> PressureTrace:
    """Relative pressure (inlet minus outlet) per timestep in mmHg.

    ``viscous="strain"`` switches to the symmetric strain-rate coupling,
    which only sees dissipation where ``w`` itself has gradients.
    """
    if not vel.meta.same_grid(vf.meta):
        raise GeometryError("velocity grid differs from the virtual field grid")
    if viscous not in ("laplacian", "strain"):
        raise ValueError("viscous must be 'laplacian' or 'strain'")
    meta = vel.meta
    region = vf.support
    spacing_m = meta.spacing_m
    dv = meta.voxel_volume_m3
    st = Stencil(region, spacing_m)
    w = vf.w
    if viscous == "strain":
        gw = st.gradient(w)
        sw = gw + np.swapaxes(gw, 0, 1)
    nt = meta.nt
    energy = np.empty(nt)
    adv = np.empty(nt)
    visc = np.empty(nt)
    for t in range(nt):
        f = np.where(region[None], vel.frame(t), 0.0)
        energy[t] = fluid.rho * float((f * w).sum()) * dv
        g = st.gradient(f)
        conv = np.einsum("jzyx,ijzyx->izyx", f, g)
        adv[t] = fluid.rho * float((conv * w).sum()) * dv
        if viscous == "laplacian":
            lap = np.stack([fv_laplacian(f[i], region, spacing_m) for i in range(3)])
            visc[t] = -fluid.mu * float((lap * w).sum()) * dv
        else:
            sv = g + np.swapaxes(g, 0, 1)
            visc[t] = 0.5 * fluid.mu * float((sv * sw).sum()) * dv
    dt_s = meta.dt * 1e-3
    transient = (np.roll(energy, -1) - np.roll(energy, 1)) / (2.0 * dt_s)
    total = (transient + adv + visc) / vf.q_w / MMHG
    terms = {
        "transient": transient / vf.q_w / MMHG,
        "advective": adv / vf.q_w / MMHG,
        "viscous": visc / vf.q_w / MMHG,
    }
    return PressureTrace("dP", "mmHg", total, meta.dt, terms=terms)


def _crossings(values: np.ndarray, dt: float, lo: int = 0, hi: Optional[int] = None):
    hi = len(values) if hi is None else hi
    out = []
    for i in range(lo, min(hi, len(values) - 1)):
        a, b = values[i], values[i + 1]
        if a * b < 0:
            out.append((i + a / (a - b)) * dt)
    return out


def pressure_peaks(p: TimeTrace, windows) -> dict:
    """Extrema of the relative pressure within the E and A filling windows."""
    e0, e1 = windows.E
    a0, a1 = windows.A
    if e1 - e0 < 1 or a1 - a0 < 1:
        raise WindowError("E or A window is empty")
    v = p.values
    flat = bool(np.all(np.abs(v) < 1e-12))
    crossings = [] if flat else _crossings(v, p.dt)
    return {
        "dE_max": float(v[e0:e1].max()),
        "dE_min": float(v[e0:e1].min()),
        "dA_max": float(v[a0:a1].max()),
        "dA_min": float(v[a0:a1].min()),
        "t_dE_max_ms": float((e0 + int(np.argmax(v[e0:e1]))) * p.dt),
        "t_dE_min_ms": float((e0 + int(np.argmin(v[e0:e1]))) * p.dt),
        "t_dA_max_ms": float((a0 + int(np.argmax(v[a0:a1]))) * p.dt),
        "t_dA_min_ms": float((a0 + int(np.argmin(v[a0:a1]))) * p.dt),
        "zero_crossings_ms": crossings,
        "e_zero_crossings_ms": [] if flat else _crossings(v, p.dt, e0, e1),
        "crossings_defined": not flat,
        "unit": "mmHg",
    }
