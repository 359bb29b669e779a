"""Command-line entry point: ``laflow <command> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 solver error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import export, geometry, metrics, pressure, spectro, stats, synth
from .core import (ScalarVolume, apply_mask, ensure_dir, is_scalar_container, load_dataset, load_scalar_volume,
                   save_scalar_volume)
from .errors import ConfigError, LaflowError
from .pcmra import PcmraParams, compute_pcmra
from .pipeline import RunConfig, dump_json, run_pipeline

log = logging.getLogger("laflow")

EXPORT_FIELDS = ("velocity", "pcmra", "q_criterion", "vorticity", "dissipation")


def _config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    try:
        d = json.loads(Path(args.config).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {args.config}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {args.config} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    return d


def _out(args, default: str) -> Path:
    return ensure_dir(getattr(args, "out", None) or default)


def _probe_from(args, cfg: dict, name: str):
    """Probe by name from the config, or built from --center/--diameter."""
    for d in cfg.get("probes", []):
        if d.get("name") == name:
            return geometry.Probe.from_dict(d), d.get("label", "LA")
    if getattr(args, "center", None) is not None:
        p = geometry.Probe(name, args.center, args.diameter, args.role,
                           args.direction if getattr(args, "direction", None) else None)
        return p, args.label
    raise ConfigError(f"probe {name!r} is neither in the config nor given with --center")


def _oriented(ds, probe, label, k=5):
    if probe.direction is None:
        probe = geometry.orient_probe(ds.velocity, ds.mask, label, probe, k)
    return probe


def _need_mask(ds):
    if ds.mask is None:
        raise ConfigError("this command needs a dataset with a mask")


# --------------------------------------------------------------------------
# commands


def cmd_info(args) -> int:
    if is_scalar_container(args.dataset):
        vol = load_scalar_volume(args.dataset)
        m = vol.meta
        info = {"kind": "scalar", "name": vol.name, "unit": vol.unit, "min": float(vol.values.min()),
                "max": float(vol.values.max())}
    else:
        ds = load_dataset(args.dataset)
        m = ds.meta
        info = {"kind": "dataset", "max_speed_m_s": ds.velocity.max_speed(),
                "labels": [int(x) for x in ds.mask.present_labels] if ds.mask is not None else []}
    info.update(dims=list(m.dims), spacing_mm=list(m.spacing), origin_mm=list(m.origin), direction=list(m.direction),
                dt_ms=m.dt, venc_cm_s=m.venc)
    print(json.dumps(info, indent=2))
    return 0


def cmd_synth(args) -> int:
    kw = dict(kind=args.kind, grid=tuple(args.grid) if len(args.grid) == 3 else args.grid[0],
              spacing_mm=args.spacing_mm, nt=args.nt, dt_ms=args.dt_ms, venc_cm_s=args.venc)
    for src, dst in (("r_mm", "radius_mm"), ("l_mm", "length_mm"), ("vmax", "v_max"), ("profile", "profile")):
        if getattr(args, src) is not None:
            kw[dst] = getattr(args, src)
    out = synth.write(synth.SynthSpec(**kw), _out(args, "synth_out"))
    print(out)
    return 0


def cmd_pcmra(args) -> int:
    ds = load_dataset(args.dataset)
    vol = compute_pcmra(ds, PcmraParams(args.gamma, args.time_resolved))
    out = _out(args, "pcmra_out")
    save_scalar_volume(vol, out / "pcmra")
    if args.vti:
        export.export_vti(vol, out / "pcmra", "pcmra")
    print(out / "pcmra")
    return 0


def cmd_metrics(args) -> int:
    ds = load_dataset(args.dataset)
    _need_mask(ds)
    vel = apply_mask(ds.velocity, ds.mask, args.label)
    fm = metrics.field_metrics(vel, ds.mask, args.label, ds.fluid, args.qcrit_threshold, args.threads)
    out = ensure_dir(_out(args, "metrics_out") / "traces")
    for name, tr in fm.traces().items():
        tr.to_csv(out / f"{name}.csv")
    print(out)
    return 0


def cmd_probe(args) -> int:
    ds = load_dataset(args.dataset)
    _need_mask(ds)
    cfg = _config(args)
    probe, label = _probe_from(args, cfg, args.name)
    probe = _oriented(ds, probe, label, args.k)
    sec = geometry.extract_section(ds.mask, label, probe)
    flow = metrics.flow_rate_trace(ds.velocity, sec, f"flow_{probe.name}")
    out = _out(args, "probe_out")
    flow.to_csv(out / f"flow_{probe.name}.csv")
    info = dict(probe.to_dict(), label=label, section_area_mm2=sec.area, section_open=sec.open)
    dump_json(info, out / f"probe_{probe.name}.json")
    print(json.dumps(info, indent=2))
    return 0


def cmd_spectrogram(args) -> int:
    ds = load_dataset(args.dataset)
    _need_mask(ds)
    cfg = _config(args)
    probe, label = _probe_from(args, cfg, args.probe)
    probe = _oriented(ds, probe, label)
    support = ds.mask.region(label)
    sm = spectro.spectrogram(ds.velocity, probe, args.nbins, support)
    out = _out(args, "spectro_out")
    sm.to_csv(out / f"spectrogram_{probe.name}.csv")
    env = sm.envelope("max")
    data = {"probe": probe.to_dict(), "bin_width_m_s": sm.bin_width, "envelope_m_s": env.values}
    sec = geometry.extract_section(ds.mask, label, probe)
    flow = metrics.flow_rate_trace(ds.velocity, sec, f"flow_{probe.name}")
    data["flow_ml_s"] = flow.values
    try:
        w = spectro.phase_windows(flow)
        pk = spectro.detect_peaks(flow, w, "PV" if probe.role == "vein" else "MV")
        data["windows"] = w.to_dict()
        data["peaks"] = pk.to_dict()["peaks"]
        data["velocity_peaks"] = spectro.detect_peaks(env, w, pk.kind).to_dict()["peaks"]
        if pk.kind == "MV":
            vols = spectro.wave_volumes(flow, w)
            data["volumes_ml"] = list(vols)
            data["ratios"] = spectro.clinical_ratios(pk, vols)
    except LaflowError as e:
        data["peak_error"] = str(e)
    dump_json(data, out / f"spectrogram_{probe.name}.json")
    print(out / f"spectrogram_{probe.name}.csv")
    return 0


def cmd_pressure(args) -> int:
    ds = load_dataset(args.dataset)
    _need_mask(ds)
    cfg = _config(args)
    pin, lin = _probe_from(args, cfg, args.src)
    pout, lout = _probe_from(args, cfg, args.dst)
    pin, pout = _oriented(ds, pin, lin), _oriented(ds, pout, lout)
    labels = args.labels or sorted({lin, lout}, key=str)
    sin = geometry.extract_section(ds.mask, lin, pin)
    sout = geometry.extract_section(ds.mask, lout, pout)
    vf = pressure.virtual_field(ds.mask, labels, sin, sout)
    vel = apply_mask(ds.velocity, ds.mask, labels)
    p = pressure.vwerp_trace(vel, vf, ds.fluid, args.viscous)
    out = _out(args, "pressure_out")
    p.to_csv(out / "dp.csv")
    res = {"solver": vf.stats, "terms_mmHg": p.terms}
    if args.mv:
        pm, lm = _probe_from(args, cfg, args.mv)
        pm = _oriented(ds, pm, lm)
        flow = metrics.flow_rate_trace(ds.velocity, geometry.extract_section(ds.mask, lm, pm))
        res["peaks"] = pressure.pressure_peaks(p, spectro.phase_windows(flow))
    dump_json(res, out / "pressure.json")
    print(out / "dp.csv")
    return 0


def cmd_pathlines(args) -> int:
    ds = load_dataset(args.dataset)
    _need_mask(ds)
    cfg = _config(args)
    support = ds.mask.region(args.label)
    if args.seeds:
        seeds = np.loadtxt(args.seeds, delimiter=",", ndmin=2)
    else:
        probe, _ = _probe_from(args, cfg, args.probe)
        region = geometry.sphere_region(ds.meta, probe.center, probe.diameter, support)
        k, j, i = np.nonzero(region)
        seeds = ds.meta.index_to_world(np.stack([i, j, k], axis=1))
    ps = geometry.trace_pathlines(ds.velocity, seeds, args.window, support)
    out = _out(args, "pathlines_out")
    path = export.write_pathlines_vtp(ps, out / "pathlines.vtp")
    print(path)
    return 0


def cmd_stats(args) -> int:
    table = stats.CohortTable.from_csv(args.table)
    res = stats.ancova(table, args.metric, posthoc="always" if args.posthoc else "auto",
                       adjusted_means=args.adjusted_means)
    text = json.dumps(res.to_dict(), indent=2, sort_keys=True)
    if getattr(args, "out", None):
        out = ensure_dir(args.out)
        (out / f"stats_{args.metric}.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("run needs --config")
    cfg = RunConfig.from_json(args.config)
    if getattr(args, "out", None):
        cfg.output = args.out
    rep = run_pipeline(cfg, threads=args.threads if args.threads_given else None)
    print(json.dumps(rep.flat(), indent=2, sort_keys=True))
    return 0


def cmd_export_vti(args) -> int:
    out = _out(args, "vti_out")
    if is_scalar_container(args.dataset):
        vol = load_scalar_volume(args.dataset)
        files = export.export_vti(vol, out / (args.field or vol.name), args.field, args.rescale)
    else:
        ds = load_dataset(args.dataset)
        if args.field in (None, "velocity"):
            files = export.export_vti(ds.velocity, out / "velocity", "velocity", args.rescale)
        elif args.field == "pcmra":
            files = export.export_vti(compute_pcmra(ds), out / "pcmra", "pcmra", args.rescale)
        else:
            _need_mask(ds)
            fm = metrics.field_metrics(apply_mask(ds.velocity, ds.mask, args.label), ds.mask, args.label, ds.fluid,
                                       threads=args.threads, keep=[args.field])
            frames = fm.fields[args.field]
            if args.field == "vorticity":
                frames = [np.sqrt((f.astype(np.float64) ** 2).sum(axis=0)).astype(np.float32) for f in frames]
            vol = ScalarVolume(ds.meta, np.stack(frames), "", args.field)
            files = export.export_vti(vol, out / args.field, args.field, args.rescale)
    for f in files:
        print(f)
    return 0


# --------------------------------------------------------------------------
# parser


def _add_probe_args(p, role="custom"):
    p.add_argument("--center", type=float, nargs=3, metavar=("X", "Y", "Z"), help="sphere center (mm)")
    p.add_argument("--diameter", type=float, default=6.0, help="sphere diameter (mm)")
    p.add_argument("--direction", type=float, nargs=3, help="flow direction; derived from the data if omitted")
    p.add_argument("--role", default=role, choices=geometry.PROBE_ROLES)
    p.add_argument("--label", default="LA", help="mask label name or number")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run configuration JSON")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="laflow", description="Left-atrial 4D flow quantification.",
                                 parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("info", parents=[common], help="print dataset header")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("synth", parents=[common], help="write an analytic synthetic dataset")
    p.add_argument("--kind", required=True, choices=synth.KINDS)
    p.add_argument("--grid", type=int, nargs="+", default=[64])
    p.add_argument("--spacing-mm", type=float, default=1.0)
    p.add_argument("--nt", type=int, default=1)
    p.add_argument("--dt-ms", type=float, default=40.0)
    p.add_argument("--venc", type=float, default=150.0, help="cm/s")
    p.add_argument("--r-mm", type=float)
    p.add_argument("--l-mm", type=float)
    p.add_argument("--vmax", type=float)
    p.add_argument("--profile", choices=("plug", "poiseuille"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pcmra", parents=[common], help="phase-contrast angiogram")
    p.add_argument("dataset")
    p.add_argument("--gamma", type=float, default=0.4)
    p.add_argument("--time-resolved", action="store_true")
    p.add_argument("--vti", action="store_true", help="also write VTK ImageData")
    p.set_defaults(func=cmd_pcmra)

    p = sub.add_parser("metrics", parents=[common], help="energy and vorticity traces")
    p.add_argument("dataset")
    p.add_argument("--label", default="LA")
    p.add_argument("--qcrit-threshold", type=float, default=metrics.QCRIT_THRESHOLD)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("probe", parents=[common], help="orient a probe and measure its flow rate")
    p.add_argument("dataset")
    p.add_argument("--name", default="probe")
    p.add_argument("-k", type=int, default=5, help="timesteps used to derive the direction")
    _add_probe_args(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("spectrogram", parents=[common], help="probe spectrogram and wave peaks")
    p.add_argument("dataset")
    p.add_argument("--probe", required=True, help="probe name from the config (or a new name with --center)")
    p.add_argument("--nbins", type=int, default=spectro.N_BINS)
    _add_probe_args(p, "valve")
    p.set_defaults(func=cmd_spectrogram)

    p = sub.add_parser("pressure", parents=[common], help="relative pressure between two probe planes")
    p.add_argument("dataset")
    p.add_argument("--from", dest="src", required=True, help="inlet probe name")
    p.add_argument("--to", dest="dst", required=True, help="outlet probe name")
    p.add_argument("--labels", nargs="+", help="labels forming the flow path")
    p.add_argument("--mv", help="mitral probe used for the filling windows")
    p.add_argument("--viscous", choices=("laplacian", "strain"), default="laplacian")
    p.set_defaults(func=cmd_pressure, center=None)

    p = sub.add_parser("pathlines", parents=[common], help="integrate pathlines to VTK PolyData")
    p.add_argument("dataset")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--seeds", help="CSV of seed points x,y,z (mm)")
    g.add_argument("--probe", help="seed at voxel centers inside this probe sphere")
    p.add_argument("--window", type=int, default=6, help="lifetime in timesteps")
    _add_probe_args(p)
    p.set_defaults(func=cmd_pathlines)

    p = sub.add_parser("stats", parents=[common], help="ANCOVA with post hoc comparisons")
    p.add_argument("--table", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--posthoc", action="store_true", help="run Tukey comparisons regardless of significance")
    p.add_argument("--adjusted-means", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("run", parents=[common], help="full pipeline from a configuration")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("export-vti", parents=[common], help="export a field as VTK ImageData")
    p.add_argument("dataset", help="dataset or scalar container")
    p.add_argument("--field", choices=EXPORT_FIELDS)
    p.add_argument("--label", default="LA")
    p.add_argument("--rescale", type=float)
    p.set_defaults(func=cmd_export_vti)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    args.threads_given = hasattr(args, "threads")
    if not hasattr(args, "threads"):
        args.threads = 1
    for name in ("config", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except LaflowError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
