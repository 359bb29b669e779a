"""Run configuration, the staged pipeline and its report.

Stages run in a fixed order: pcmra, mask, geometry, metrics, spectrograms,
pressure, report. Each stage writes its artifacts as soon as it finishes;
on failure the manifest records the completed stages and the error, and the
partial outputs stay on disk. Only the manifest carries timestamps, so
every other file is byte-identical between runs on the same inputs.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import export, geometry, metrics, pressure, spectro
from .core import (LABELS, Dataset, ScalarVolume, apply_mask, ensure_dir, load_dataset, resolve_label,
                   save_scalar_volume)
from .errors import ConfigError, LaflowError, OpenSectionWarning, PipelineError
from .pcmra import PcmraParams, compute_pcmra

log = logging.getLogger(__name__)

STAGES = ("pcmra", "mask", "geometry", "metrics", "spectrograms", "pressure", "report")
_NEEDS_MASK = {"mask", "geometry", "metrics", "spectrograms", "pressure"}
_EXPORTABLE = ("velocity", "pcmra", "q_criterion", "vorticity", "dissipation")


def dump_json(obj, path) -> None:
    """Deterministic JSON: sorted keys, full float precision, trailing newline."""
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=True) + "\n")


def _plain(o):
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return _plain(o.tolist())
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    return o


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    dataset: str
    output: str
    probes: list = field(default_factory=list)  # list of dicts (Probe.to_dict plus "label")
    labels: dict = field(default_factory=lambda: dict(LABELS))
    stages: list = field(default_factory=lambda: list(STAGES))
    pcmra: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    spectrogram: dict = field(default_factory=dict)
    pressure: dict = field(default_factory=dict)
    export: dict = field(default_factory=dict)
    subject: dict = field(default_factory=dict)
    direction_k: int = 5
    threads: int = 1

    @classmethod
    def from_dict(cls, d: dict, base: Optional[Path] = None) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "dataset" not in d or "output" not in d:
            raise ConfigError("config needs 'dataset' and 'output'")
        d = dict(d)
        if base is not None:
            for k in ("dataset", "output"):
                if not os.path.isabs(d[k]):
                    d[k] = str(base / d[k])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(d, path.parent)

    # settings with defaults filled in
    @property
    def metric_label(self):
        return self.metrics.get("label", "LA")

    @property
    def mv_probe(self) -> Optional[str]:
        if "mv_probe" in self.spectrogram:
            return self.spectrogram["mv_probe"]
        valves = [p["name"] for p in self.probes if p.get("role") == "valve"]
        return valves[0] if valves else None

    @property
    def spectro_probes(self) -> list:
        return list(self.spectrogram.get("probes", [p["name"] for p in self.probes if p.get("role") != "custom"]))


def _label_id(cfg: RunConfig, name) -> int:
    if isinstance(name, str) and name in cfg.labels:
        return int(cfg.labels[name])
    try:
        return resolve_label(name)
    except LaflowError as e:
        raise ConfigError(str(e)) from e


def validate_config(cfg: RunConfig) -> dict:
    """Static checks that need no data; returns the parsed probes by name."""
    unknown = [s for s in cfg.stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; expected a subset of {STAGES}")
    if not Path(cfg.dataset).exists():
        raise ConfigError(f"dataset {cfg.dataset} does not exist")
    if not isinstance(cfg.labels, dict) or not all(isinstance(v, int) and 0 <= v < 256 for v in cfg.labels.values()):
        raise ConfigError("labels must map names to integers in 0..255")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        raise ConfigError("threads must be a positive integer")
    if not isinstance(cfg.direction_k, int) or cfg.direction_k < 1:
        raise ConfigError("direction_k must be a positive integer")
    try:
        PcmraParams(**cfg.pcmra)
    except TypeError as e:
        raise ConfigError(f"pcmra: {e}") from e
    except LaflowError as e:
        raise ConfigError(f"pcmra: {e}") from e
    thr = cfg.metrics.get("qcrit_threshold", metrics.QCRIT_THRESHOLD)
    if not isinstance(thr, (int, float)) or not math.isfinite(thr):
        raise ConfigError("metrics.qcrit_threshold must be a finite number")
    _label_id(cfg, cfg.metric_label)
    probes = {}
    for d in cfg.probes:
        if not isinstance(d, dict) or "name" not in d or "center_mm" not in d:
            raise ConfigError("each probe needs 'name' and 'center_mm'")
        if d["name"] in probes:
            raise ConfigError(f"duplicate probe name {d['name']!r}")
        try:
            probes[d["name"]] = geometry.Probe.from_dict(d)
        except (LaflowError, TypeError, ValueError) as e:
            raise ConfigError(f"probe {d['name']!r}: {e}") from e
        _label_id(cfg, d.get("label", "LA"))
    if "spectrograms" in cfg.stages:
        for p in cfg.spectro_probes:
            if p not in probes:
                raise ConfigError(f"spectrogram probe {p!r} is not defined")
        nb = cfg.spectrogram.get("nbins", spectro.N_BINS)
        if not isinstance(nb, int) or nb < 2:
            raise ConfigError("spectrogram.nbins must be an integer >= 2")
    if cfg.mv_probe is not None and cfg.mv_probe not in probes:
        raise ConfigError(f"mitral probe {cfg.mv_probe!r} is not defined")
    if "pressure" in cfg.stages:
        for k in ("inlet", "outlet"):
            if cfg.pressure.get(k) not in probes:
                raise ConfigError(f"pressure.{k} must name a defined probe, got {cfg.pressure.get(k)!r}")
        if cfg.pressure["inlet"] == cfg.pressure["outlet"]:
            raise ConfigError("pressure inlet and outlet must differ")
        if cfg.pressure.get("viscous", "laplacian") not in ("laplacian", "strain"):
            raise ConfigError("pressure.viscous must be 'laplacian' or 'strain'")
        for lab in cfg.pressure.get("labels", ["LA", "LV"]):
            _label_id(cfg, lab)
    for k in cfg.export:
        if k not in _EXPORTABLE:
            raise ConfigError(f"cannot export {k!r}; choose from {_EXPORTABLE}")
    if cfg.subject:
        w, h = cfg.subject.get("weight_kg"), cfg.subject.get("height_cm")
        if not (isinstance(w, (int, float)) and w > 0 and isinstance(h, (int, float)) and h > 0):
            raise ConfigError("subject needs positive weight_kg and height_cm")
    try:
        out = ensure_dir(cfg.output)
        probe_file = out / ".write_test"
        probe_file.write_bytes(b"")
        probe_file.unlink()
    except OSError as e:
        raise ConfigError(f"output directory {cfg.output} is not writable: {e}") from e
    return probes


def validate_against(cfg: RunConfig, ds: Dataset, probes: dict) -> None:
    """Checks that need the loaded dataset; still before any compute."""
    needs_mask = bool(_NEEDS_MASK & set(cfg.stages))
    if needs_mask and ds.mask is None:
        raise ConfigError("the dataset has no mask but masked stages are enabled")
    if ds.mask is None:
        return
    present = set(ds.mask.present_labels)

    def need(lab):
        if _label_id(cfg, lab) not in present:
            raise ConfigError(f"label {lab!r} is not present in the mask")

    if {"mask", "metrics"} & set(cfg.stages):
        need(cfg.metric_label)
    if "pressure" in cfg.stages:
        for lab in cfg.pressure.get("labels", ["LA", "LV"]):
            need(lab)
    used = set()
    if {"geometry", "spectrograms", "pressure"} & set(cfg.stages):
        used = set(probes)
    for name in sorted(used):
        p = probes[name]
        d = next(x for x in cfg.probes if x["name"] == name)
        lab = d.get("label", "LA")
        need(lab)
        region = ds.mask.labels == _label_id(cfg, lab)
        if not geometry.nearest_inside(region, ds.meta, np.asarray(p.center)[None])[0]:
            raise ConfigError(f"probe {name!r} center lies outside label {lab!r}")
        if "spectrograms" in cfg.stages and name in cfg.spectro_probes:
            n = int(geometry.sphere_region(ds.meta, p.center, p.diameter, region).sum())
            if n < spectro.MIN_SPHERE_SAMPLES:
                raise ConfigError(f"probe {name!r} sphere holds {n} mask voxels, need {spectro.MIN_SPHERE_SAMPLES}")


# --------------------------------------------------------------------------
# report helpers


def window_peaks(trace: metrics.TimeTrace, windows: Optional[spectro.PhaseWindows]) -> dict:
    """Peak value and time per cardiac phase (systole S, E and A waves)."""
    v = trace.values
    ok = np.ones(trace.nt, dtype=bool) if trace.flagged is None else ~np.asarray(trace.flagged)
    if not ok.any():
        return {"flagged": trace.nt}
    masked = np.where(ok, v, -np.inf)
    out = {"max": float(masked.max()), "t_max_ms": float(np.argmax(masked) * trace.dt), "min": float(v[ok].min()),
           "mean": float(v[ok].mean()), "flagged": int((~ok).sum())}
    if windows is not None:
        for key, (a, b) in (("S", windows.systole), ("E", windows.E), ("A", windows.A)):
            if b > a and ok[a:b].any():
                i = a + int(np.argmax(masked[a:b]))
                out[f"{key}_peak"] = float(v[i])
                out[f"t_{key}_peak_ms"] = float(i * trace.dt)
    return out


# --------------------------------------------------------------------------
# pipeline


@dataclass
class Report:
    values: dict
    outputs: list
    stages: list

    def flat(self) -> dict:
        """Single-row summary ``{"KE_S_peak": ..., "MV_E": ...}`` for cohort tables."""
        out = {}
        for name, d in sorted(self.values.get("traces", {}).items()):
            for key in ("S_peak", "E_peak", "A_peak"):
                if key in d:
                    out[f"{name}_{key}"] = d[key]
        for k, v in sorted(self.values.get("flow", {}).items()):
            if isinstance(v, (int, float)):
                out[k] = v
        for k, v in sorted(self.values.get("pressure", {}).items()):
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                out[k] = v
        for k in ("LA_volume_ml", "LA_volume_ml_m2"):
            if k in self.values:
                out[k] = self.values[k]
        return out


class _Run:
    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.outputs = []
        self.completed = []
        self.timing = {}
        self.values = {}

    def rel(self, p) -> str:
        s = str(Path(p).relative_to(self.out))
        self.outputs.append(s)
        return s

    def manifest(self, status: str, error: Optional[dict] = None) -> None:
        m = {"status": status, "stages_requested": [s for s in STAGES if s in self.cfg.stages],
             "stages_completed": self.completed, "outputs": sorted(self.outputs), "timing_s": self.timing,
             "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
        if error:
            m["error"] = error
        dump_json(m, self.out / "manifest.json")


def run_pipeline(cfg: RunConfig, threads: Optional[int] = None) -> Report:
    """Validate ``cfg`` and run the enabled stages, writing artifacts under ``cfg.output``."""
    probes = validate_config(cfg)
    threads = threads or cfg.threads
    try:
        ds = load_dataset(cfg.dataset)
    except LaflowError as e:
        raise PipelineError("load", e) from e
    validate_against(cfg, ds, probes)
    out = ensure_dir(cfg.output)
    run = _Run(cfg, out)
    state = {"ds": ds, "vel": ds.velocity, "probes": probes, "sections": {}, "traces": {}, "windows": None}
    stage_fns = {"pcmra": _stage_pcmra, "mask": _stage_mask, "geometry": _stage_geometry,
                 "metrics": _stage_metrics, "spectrograms": _stage_spectro, "pressure": _stage_pressure,
                 "report": _stage_report}
    for stage in STAGES:
        if stage not in cfg.stages:
            continue
        t0 = time.perf_counter()
        try:
            stage_fns[stage](run, state, threads)
        except LaflowError as e:
            run.timing[stage] = round(time.perf_counter() - t0, 3)
            run.manifest("failed", {"stage": stage, "type": type(e).__name__, "message": str(e)})
            raise PipelineError(stage, e) from e
        run.timing[stage] = round(time.perf_counter() - t0, 3)
        run.completed.append(stage)
        log.info("stage %s done in %.2f s", stage, run.timing[stage])
    run.manifest("ok")
    return Report(run.values, sorted(run.outputs), list(run.completed))


def _stage_pcmra(run: _Run, st: dict, threads: int) -> None:
    vol = compute_pcmra(st["ds"], PcmraParams(**run.cfg.pcmra))
    save_scalar_volume(vol, run.out / "pcmra")
    run.rel(run.out / "pcmra")
    if run.cfg.export.get("pcmra"):
        for f in export.export_vti(vol, run.out / "vti" / "pcmra", "pcmra"):
            run.rel(f)


def _stage_mask(run: _Run, st: dict, threads: int) -> None:
    cfg = run.cfg
    ds = st["ds"]
    labels = sorted({_label_id(cfg, x) for x in [cfg.metric_label] + cfg.pressure.get("labels", [])
                     + [p.get("label", "LA") for p in cfg.probes]} & set(ds.mask.present_labels))
    st["vel"] = apply_mask(ds.velocity, ds.mask, labels)
    lab = _label_id(cfg, cfg.metric_label)
    vol_ml = geometry.mask_volume(ds.mask, lab)
    summary = {"label": cfg.metric_label, "volume_ml": vol_ml, "labels_kept": labels}
    run.values["LA_volume_ml"] = vol_ml
    if cfg.subject:
        idx = geometry.index_by_bsa(vol_ml, cfg.subject["weight_kg"], cfg.subject["height_cm"])
        summary["volume_ml_m2"] = idx
        run.values["LA_volume_ml_m2"] = idx
    dump_json(summary, run.out / "mask.json")
    run.rel(run.out / "mask.json")


def _stage_geometry(run: _Run, st: dict, threads: int) -> None:
    cfg = run.cfg
    ds = st["ds"]
    info = {}
    oriented = {}
    for d in cfg.probes:
        p = st["probes"][d["name"]]
        lab = _label_id(cfg, d.get("label", "LA"))
        if p.direction is None:
            p = geometry.orient_probe(st["vel"], ds.mask, lab, p, cfg.direction_k)
        oriented[p.name] = p
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", OpenSectionWarning)
            sec = geometry.extract_section(ds.mask, lab, p)
        st["sections"][p.name] = sec
        info[p.name] = dict(p.to_dict(), label=d.get("label", "LA"), section_area_mm2=sec.area,
                            section_samples=sec.n_samples, section_open=sec.open,
                            warnings=[str(w.message) for w in caught])
    st["probes"] = oriented
    dump_json(info, run.out / "probes.json")
    run.rel(run.out / "probes.json")
    tdir = ensure_dir(run.out / "traces")
    for name, sec in st["sections"].items():
        tr = metrics.flow_rate_trace(st["vel"], sec, f"flow_{name}")
        st["traces"][tr.name] = tr
        tr.to_csv(tdir / f"{tr.name}.csv")
        run.rel(tdir / f"{tr.name}.csv")
    mv = cfg.mv_probe
    if mv is not None:
        try:
            st["windows"] = spectro.phase_windows(st["traces"][f"flow_{mv}"])
        except LaflowError as e:
            log.warning("no filling windows: %s", e)


def _stage_metrics(run: _Run, st: dict, threads: int) -> None:
    cfg = run.cfg
    keep = [k for k in ("vorticity", "q_criterion", "dissipation") if cfg.export.get(k)]
    fm = metrics.field_metrics(st["vel"], st["ds"].mask, _label_id(cfg, cfg.metric_label), st["ds"].fluid,
                               cfg.metrics.get("qcrit_threshold", metrics.QCRIT_THRESHOLD), threads, keep)
    tdir = ensure_dir(run.out / "traces")
    for name, tr in fm.traces().items():
        st["traces"][name] = tr
        tr.to_csv(tdir / f"{name}.csv")
        run.rel(tdir / f"{name}.csv")
    meta = st["ds"].meta
    for name in keep:
        frames = fm.fields[name]
        if name == "vorticity":
            values = np.stack([np.sqrt((f.astype(np.float64) ** 2).sum(axis=0)) for f in frames]).astype(np.float32)
        else:
            values = np.stack(frames)
        vol = ScalarVolume(meta, values, "", name)
        for f in export.export_vti(vol, run.out / "vti" / name, name):
            run.rel(f)
    if cfg.export.get("velocity"):
        for f in export.export_vti(st["vel"], run.out / "vti" / "velocity"):
            run.rel(f)


def _stage_spectro(run: _Run, st: dict, threads: int) -> None:
    cfg = run.cfg
    ds = st["ds"]
    sdir = ensure_dir(run.out / "spectro")
    nb = cfg.spectrogram.get("nbins", spectro.N_BINS)
    result = {"probes": {}}
    windows = st["windows"]
    for name in cfg.spectro_probes:
        p = st["probes"][name]
        if p.direction is None:
            raise ConfigError(f"probe {name!r} has no direction; enable the geometry stage")
        d = next(x for x in cfg.probes if x["name"] == name)
        support = ds.mask.labels == _label_id(cfg, d.get("label", "LA"))
        sm = spectro.spectrogram(st["vel"], p, nb, support)
        sm.to_csv(sdir / f"{name}.csv")
        run.rel(sdir / f"{name}.csv")
        env = sm.envelope("max" if p.role != "vein" else "mean")
        entry = {"n_samples": sm.n_samples, "bin_width_m_s": sm.bin_width, "envelope": env.values}
        flow = st["traces"].get(f"flow_{name}")
        if windows is not None:
            kind = "PV" if p.role == "vein" else "MV"
            try:
                entry["velocity_peaks"] = spectro.detect_peaks(env, windows, kind).to_dict()["peaks"]
                if flow is not None:
                    entry["flow_peaks"] = spectro.detect_peaks(flow, windows, kind).to_dict()["peaks"]
            except LaflowError as e:
                entry["peak_error"] = str(e)
        result["probes"][name] = entry
    flowvals = {}
    mv = cfg.mv_probe
    if windows is not None and mv is not None and f"flow_{mv}" in st["traces"]:
        result["windows"] = windows.to_dict()
        q = st["traces"][f"flow_{mv}"]
        try:
            pk = spectro.detect_peaks(q, windows, "MV")
            vols = spectro.wave_volumes(q, windows)
            veins = {}
            for d in cfg.probes:
                if d.get("role") == "vein" and f"flow_{d['name']}" in st["traces"]:
                    veins[d["name"]] = spectro.detect_peaks(st["traces"][f"flow_{d['name']}"], windows, "PV")
            ratios = spectro.clinical_ratios(pk, vols, veins)
            flowvals.update({"MV_E": pk["E"].value, "MV_A": pk["A"].value, "MV_E_vol": vols[0],
                             "MV_A_vol": vols[1], "MV_E/A": ratios["E/A"], "MV_E_vol/A_vol": ratios["E_vol/A_vol"]})
            for vn, ps in veins.items():
                flowvals.update({f"{vn}_S": ps["S"].value, f"{vn}_D": ps["D"].value, f"{vn}_Ar": ps["Ar"].value,
                                 f"{vn}_S/D": ratios[f"S/D {vn}"]})
        except LaflowError as e:
            result["peak_error"] = str(e)
    result["flow"] = flowvals
    run.values["flow"] = flowvals
    run.values["spectro"] = result
    dump_json(result, sdir / "spectro.json")
    run.rel(sdir / "spectro.json")


def _stage_pressure(run: _Run, st: dict, threads: int) -> None:
    cfg = run.cfg
    ds = st["ds"]
    if not st["sections"]:
        raise ConfigError("the pressure stage needs the geometry stage")
    inlet = st["sections"][cfg.pressure["inlet"]]
    outlet = st["sections"][cfg.pressure["outlet"]]
    labels = [_label_id(cfg, x) for x in cfg.pressure.get("labels", ["LA", "LV"])]
    vf = pressure.virtual_field(ds.mask, labels, inlet, outlet)
    p = pressure.vwerp_trace(st["vel"], vf, ds.fluid, cfg.pressure.get("viscous", "laplacian"))
    pdir = ensure_dir(run.out / "pressure")
    p.to_csv(pdir / "dp.csv")
    run.rel(pdir / "dp.csv")
    st["traces"]["dP"] = p
    res = {"solver": vf.stats, "terms_mmHg": p.terms, "inlet": cfg.pressure["inlet"],
           "outlet": cfg.pressure["outlet"]}
    if st["windows"] is not None:
        try:
            res["peaks"] = pressure.pressure_peaks(p, st["windows"])
        except LaflowError as e:
            res["peak_error"] = str(e)
    run.values["pressure"] = {k: v for k, v in res.get("peaks", {}).items() if k.startswith("d")}
    dump_json(res, pdir / "pressure.json")
    run.rel(pdir / "pressure.json")


def _stage_report(run: _Run, st: dict, threads: int) -> None:
    w = st["windows"]
    run.values["traces"] = {name: window_peaks(tr, w) for name, tr in sorted(st["traces"].items())}
    if w is not None:
        run.values["windows"] = w.to_dict()
    rep = Report(run.values, [], [])
    dump_json({"values": run.values, "summary": rep.flat()}, run.out / "report.json")
    run.rel(run.out / "report.json")
