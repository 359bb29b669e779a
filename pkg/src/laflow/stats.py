"""Cohort statistics, segmentation agreement metrics and cycle resampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage, special
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .core import Mask, resolve_label
from .errors import DegenerateError, DesignError, GeometryError
from .metrics import TimeTrace


# --------------------------------------------------------------------------
# cohort table


@dataclass
class CohortTable:
    subject_id: list
    group: list
    age: np.ndarray
    metrics: dict = field(default_factory=dict)  # name -> float array, NaN where missing

    @classmethod
    def from_csv(cls, path) -> "CohortTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DesignError(f"{path}: no rows")
        cols = list(rows[0].keys())
        for need in ("subject_id", "group", "age"):
            if need not in cols:
                raise DesignError(f"{path}: missing column {need!r}")

        def num(s):
            s = (s or "").strip()
            return float(s) if s else math.nan

        metrics = {c: np.array([num(r[c]) for r in rows]) for c in cols if c not in ("subject_id", "group", "age")}
        return cls([r["subject_id"] for r in rows], [r["group"] for r in rows],
                   np.array([num(r["age"]) for r in rows]), metrics)

    def to_csv(self, path) -> None:
        names = list(self.metrics)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["subject_id", "group", "age"] + names)
            for i in range(len(self.subject_id)):
                wr.writerow([self.subject_id[i], self.group[i], repr(float(self.age[i]))]
                            + [repr(float(self.metrics[m][i])) for m in names])

    @property
    def groups(self) -> list:
        """Group names in order of first appearance."""
        return list(dict.fromkeys(self.group))

    def samples(self, metric: str, values: Optional[np.ndarray] = None) -> list:
        y = self.metrics[metric] if values is None else values
        g = np.asarray(self.group)
        return [y[g == name] for name in self.groups]


@dataclass
class StatResult:
    metric: str
    n: int
    groups: list
    effects: dict  # effect -> {ss, df, F, p, eta_p2}
    ss_residual: float
    df_residual: int
    coefficients: dict
    posthoc: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "n": self.n, "groups": self.groups, "effects": self.effects,
                "ss_residual": self.ss_residual, "df_residual": self.df_residual,
                "coefficients": self.coefficients, "posthoc": self.posthoc}


def _rss(X: np.ndarray, y: np.ndarray):
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise DesignError("singular design matrix")
    r = y - X @ beta
    return float(r @ r), beta


def _design(table: CohortTable, mask: np.ndarray, covariate: str):
    g = np.asarray(table.group)[mask]
    levels = [x for x in table.groups if np.any(g == x)]
    dummies = np.stack([(g == lv).astype(float) for lv in levels[1:]], axis=1) if len(levels) > 1 else None
    cov = table.age[mask] if covariate == "age" else table.metrics[covariate][mask]
    return levels, dummies, cov.astype(float)


def ancova(table: CohortTable, metric: str, covariate: str = "age", posthoc: str = "auto",
           adjusted_means: bool = False, alpha: float = 0.05) -> StatResult:
    """Linear model ``metric ~ group + covariate`` with Type II sums of squares.

    Slopes are assumed equal across groups. Partial eta squared is
    ``SS_effect / (SS_effect + SS_residual)``. Post hoc Tukey comparisons run
    on raw group values when the group effect is significant (``posthoc="auto"``)
    or always; ``adjusted_means`` removes the covariate trend first.
    """
    if metric not in table.metrics:
        raise DesignError(f"unknown metric {metric!r}")
    y_all = table.metrics[metric]
    if np.isnan(y_all).any() or np.isnan(table.age).any():
        raise DesignError(f"missing values in {metric!r} or age")
    keep = np.ones(len(y_all), dtype=bool)
    levels, D, cov = _design(table, keep, covariate)
    y = y_all.astype(float)
    n = len(y)
    counts = [int(np.sum(np.asarray(table.group) == lv)) for lv in levels]
    if len(levels) < 2 or min(counts) < 2:
        raise DesignError("need at least 2 groups with at least 2 subjects each")
    if np.ptp(cov) == 0:
        raise DesignError(f"covariate {covariate!r} is constant")
    one = np.ones((n, 1))
    X_full = np.hstack([one, D, cov[:, None]])
    X_group = np.hstack([one, D])
    X_cov = np.hstack([one, cov[:, None]])
    df_res = n - X_full.shape[1]
    if df_res < 1:
        raise DesignError("no residual degrees of freedom")
    rss_full, beta = _rss(X_full, y)
    rss_nogroup, _ = _rss(X_cov, y)
    rss_nocov, _ = _rss(X_group, y)
    if rss_full <= 0:
        # exact fit: F is infinite for any nonzero effect
        rss_full = 0.0
    effects = {}
    for name, ss, df in (("group", rss_nogroup - rss_full, len(levels) - 1), (covariate, rss_nocov - rss_full, 1)):
        ss = max(ss, 0.0)
        if rss_full == 0.0:
            F = math.inf if ss > 0 else 0.0
            p = 0.0 if ss > 0 else 1.0
        else:
            F = (ss / df) / (rss_full / df_res)
            p = float(special.fdtrc(df, df_res, F))
        eta = ss / (ss + rss_full) if ss + rss_full > 0 else 0.0
        effects[name] = {"ss": ss, "df": df, "F": float(F), "p": p, "eta_p2": float(eta)}
    coef = {"intercept": float(beta[0])}
    for i, lv in enumerate(levels[1:]):
        coef[f"group[{lv}]"] = float(beta[1 + i])
    coef[covariate] = float(beta[-1])
    res = StatResult(metric, n, levels, effects, rss_full, df_res, coef)
    if posthoc == "always" or (posthoc == "auto" and effects["group"]["p"] < alpha):
        vals = y - beta[-1] * (cov - cov.mean()) if adjusted_means else y
        res.posthoc = tukey_hsd(table.samples(metric, vals), levels)
    return res


# --------------------------------------------------------------------------
# studentized range

_GL_NODES = 24


def _gl(a: float, b: float, panels: int):
    x, w = np.polynomial.legendre.leggauss(_GL_NODES)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * w).ravel()


_Z, _ZW = _gl(-8.5, 8.5, 12)


def _range_cdf_normal(w: np.ndarray, k: int) -> np.ndarray:
    """P(range of k standard normals <= w), vectorised over ``w``."""
    w = np.asarray(w, dtype=float)[..., None]
    phi = np.exp(-0.5 * _Z**2) / math.sqrt(2 * math.pi)
    inner = np.clip(special.ndtr(_Z) - special.ndtr(_Z - w), 0.0, 1.0) ** (k - 1)
    return k * (inner * phi * _ZW).sum(axis=-1)


def ptukey(q: float, k: int, df: float) -> float:
    """CDF of the studentized range ``q`` for ``k`` means and ``df`` degrees of freedom.

    Outer integral over the scaled chi density of ``s = sqrt(chi2_df / df)``,
    inner over the normal range distribution, both by composite
    Gauss-Legendre quadrature.
    """
    if q <= 0:
        return 0.0
    if k < 2 or df <= 0:
        raise ValueError("need k >= 2 and df > 0")
    if math.isinf(df):
        return float(np.clip(_range_cdf_normal(np.array([q]), k)[0], 0.0, 1.0))
    # s has mean ~1 and sd ~1/sqrt(2 df); small df has a long right tail
    sd = 1.0 / math.sqrt(2.0 * df)
    lo = max(0.0, 1.0 - 14.0 * sd)
    hi = 1.0 + 14.0 * sd + (12.0 / df if df < 30 else 0.0)
    s, sw = _gl(lo, hi, 24)
    logf = (0.5 * df * math.log(df) - special.gammaln(0.5 * df) - (0.5 * df - 1.0) * math.log(2.0)
            + (df - 1.0) * np.log(np.maximum(s, 1e-300)) - 0.5 * df * s * s)
    dens = np.where(s > 0, np.exp(logf), 0.0)
    val = float((dens * sw * _range_cdf_normal(q * s, k)).sum())
    return min(max(val, 0.0), 1.0)


def qtukey(p: float, k: int, df: float) -> float:
    """Quantile of the studentized range (the Tukey critical value for ``p = 1 - alpha``)."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    hi = 10.0
    while ptukey(hi, k, df) < p:
        hi *= 2.0
    return brentq(lambda q: ptukey(q, k, df) - p, 1e-9, hi, xtol=1e-10)


def cohens_d(a, b) -> float:
    """``(mean(a) - mean(b)) / pooled SD``; the sign follows the listed order."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise DegenerateError("each sample needs at least 2 values")
    na, nb = len(a), len(b)
    sp = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    if sp == 0:
        raise DegenerateError("zero pooled standard deviation")
    return float((a.mean() - b.mean()) / sp)


def tukey_hsd(groups: Sequence, names: Optional[Sequence] = None) -> list:
    """Tukey-Kramer pairwise comparisons on raw group values."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    k = len(groups)
    names = list(names) if names is not None else [str(i) for i in range(k)]
    if k < 2 or min(len(g) for g in groups) < 2:
        raise DesignError("need at least 2 groups with at least 2 values each")
    N = sum(len(g) for g in groups)
    df = N - k
    sse = sum(float(((g - g.mean()) ** 2).sum()) for g in groups)
    mse = sse / df
    if mse == 0:
        raise DegenerateError("zero pooled within-group variance")
    out = []
    for i in range(k):
        for j in range(i + 1, k):
            a, b = groups[i], groups[j]
            diff = float(a.mean() - b.mean())
            se = math.sqrt(0.5 * mse * (1.0 / len(a) + 1.0 / len(b)))
            q = abs(diff) / se
            p = 1.0 - ptukey(q, k, df)
            try:
                d = cohens_d(a, b)
            except DegenerateError:
                d = math.nan
            out.append({"pair": [names[i], names[j]], "diff": diff, "q": q, "p": min(max(p, 0.0), 1.0),
                        "cohens_d": d})
    adj = bh_adjust([r["p"] for r in out])["adjusted"]
    for r, pa in zip(out, adj):
        r["p_adjusted"] = float(max(pa, r["p"]))
    return out


def bh_adjust(pvals, alpha: float = 0.05) -> dict:
    """Benjamini-Hochberg step-up adjustment."""
    p = np.asarray(pvals, dtype=float)
    m = p.size
    if m == 0:
        return {"adjusted": np.array([]), "reject": np.array([], dtype=bool)}
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    adj = np.empty(m)
    adj[order] = adj_sorted
    return {"adjusted": adj, "reject": adj <= alpha}


def pearson_ci(x, y, level: float = 0.95) -> dict:
    """Pearson r with a Fisher-z confidence interval."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if len(y) != n:
        raise ValueError("x and y differ in length")
    if n < 4:
        raise DegenerateError("need at least 4 pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateError("zero variance")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) >= 1.0 - 1e-15:
        return {"r": r, "ci_low": r, "ci_high": r, "n": n, "degenerate": True}
    zc = float(special.ndtri(0.5 + level / 2.0))
    z = math.atanh(r)
    half = zc / math.sqrt(n - 3)
    return {"r": r, "ci_low": math.tanh(z - half), "ci_high": math.tanh(z + half), "n": n, "degenerate": False}


def bland_altman(a, b) -> dict:
    """Bias ``mean(a - b)`` and 95% limits of agreement."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("a and b differ in length")
    if a.size < 2:
        raise DegenerateError("need at least 2 pairs")
    d = a - b
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return {"bias": bias, "sd": sd, "loa_low": bias - 1.96 * sd, "loa_high": bias + 1.96 * sd}


# --------------------------------------------------------------------------
# segmentation agreement


def _pair(a: Mask, b: Mask, label):
    if a.meta.shape3 != b.meta.shape3 or not np.allclose(a.meta.spacing, b.meta.spacing):
        raise GeometryError("masks are on different grids")
    lab = resolve_label(label)
    return a.labels == lab, b.labels == lab


def dice(a: Mask, b: Mask, label) -> float:
    A, B = _pair(a, b, label)
    s = int(A.sum()) + int(B.sum())
    if s == 0:
        raise DegenerateError("both masks are empty")
    return 2.0 * int((A & B).sum()) / s


def boundary(region: np.ndarray) -> np.ndarray:
    """Voxels of ``region`` with at least one 6-neighbour outside it."""
    st = ndimage.generate_binary_structure(3, 1)
    return region & ~ndimage.binary_erosion(region, structure=st, border_value=0)


def hausdorff95(a: Mask, b: Mask, label) -> float:
    """95th percentile of pooled directed surface distances between two masks (mm)."""
    A, B = _pair(a, b, label)
    if not A.any() or not B.any():
        raise DegenerateError("empty mask")
    sa, sb = boundary(A), boundary(B)
    sampling = tuple(reversed(a.meta.spacing))  # (z, y, x)
    da = ndimage.distance_transform_edt(~sb, sampling=sampling)[sa]
    db = ndimage.distance_transform_edt(~sa, sampling=sampling)[sb]
    return float(np.percentile(np.concatenate([da, db]), 95))


# --------------------------------------------------------------------------
# cycle resampling


def resample_cycle(trace: TimeTrace, n_out: int, cycle_ms: Optional[float] = None) -> TimeTrace:
    """Periodic cubic resampling to ``n_out`` samples over one cycle.

    ``cycle_ms`` rescales time, e.g. 1000 ms for a 60 bpm normalised cycle.
    """
    if trace.nt < 4:
        raise ValueError("need at least 4 samples")
    if n_out < 4:
        raise ValueError("n_out must be at least 4")
    T = trace.nt * trace.dt
    t = np.arange(trace.nt + 1) * trace.dt
    y = np.append(trace.values, trace.values[0])
    spline = CubicSpline(t, y, bc_type="periodic")
    vals = spline(np.arange(n_out) * T / n_out)
    out_T = T if cycle_ms is None else float(cycle_ms)
    return TimeTrace(trace.name, trace.unit, vals, out_T / n_out, trace.normalization)
