import json

import numpy as np
import pytest

from laflow import pressure
from laflow.cli import main
from laflow.core import load_dataset, load_scalar_volume
from laflow.errors import ConfigError, PipelineError
from laflow.pipeline import RunConfig, run_pipeline

from conftest import pipeline_case


@pytest.fixture(scope="module")
def case(tmp_path_factory):
    root = tmp_path_factory.mktemp("case")
    cfg, truth = pipeline_case(root)
    return root, cfg, truth


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_and_info(tmp_path, capsys):
    assert main(["synth", "--kind", "poiseuille", "--grid", "20", "20", "16", "--r-mm", "8", "--vmax", "0.5",
                 "--out", str(tmp_path / "p")]) == 0
    assert load_dataset(tmp_path / "p").meta.dims == (20, 20, 16, 1)
    capsys.readouterr()
    assert main(["info", str(tmp_path / "p")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["labels"] == [1]
    assert info["max_speed_m_s"] == pytest.approx(0.5, rel=0.01)


def test_pcmra_command(case, tmp_path):
    root, _, _ = case
    assert main(["pcmra", str(root / "data"), "--gamma", "0.5", "--vti", "--out", str(tmp_path)]) == 0
    vol = load_scalar_volume(tmp_path / "pcmra")
    assert vol.meta.nt == 1
    assert (tmp_path / "pcmra.vti").exists()


def test_metrics_command(case, tmp_path):
    root, _, _ = case
    assert main(["metrics", str(root / "data"), "--label", "LA", "--out", str(tmp_path)]) == 0
    names = sorted(p.name for p in (tmp_path / "traces").iterdir())
    assert "KE.csv" in names and "EL.csv" in names and "Qcrit.csv" in names


def test_probe_spectrogram_pressure_commands(case, tmp_path):
    root, cfg, truth = case
    assert main(["probe", str(root / "data"), "--config", str(cfg), "--name", "MV", "--out", str(tmp_path)]) == 0
    info = json.loads((tmp_path / "probe_MV.json").read_text())
    np.testing.assert_allclose(info["direction"], [0, 0, 1], atol=1e-6)
    assert main(["spectrogram", str(root / "data"), "--config", str(cfg), "--probe", "MV",
                 "--out", str(tmp_path)]) == 0
    sp = json.loads((tmp_path / "spectrogram_MV.json").read_text())
    assert sp["ratios"]["E/A"] == pytest.approx(2.0, rel=0.02)
    assert main(["pressure", str(root / "data"), "--config", str(cfg), "--from", "inlet", "--to", "outlet",
                 "--labels", "LA", "--mv", "MV", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "pressure.json").read_text())
    assert res["solver"]["residual"] <= 1e-8
    assert "dE_max" in res["peaks"]


def test_probe_from_command_line(case, tmp_path):
    root, _, truth = case
    c = truth["probes"][1]["center_mm"]
    assert main(["probe", str(root / "data"), "--name", "x", "--center", *map(str, c), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "flow_x.csv").exists()


def test_pathlines_command(case, tmp_path):
    root, cfg, _ = case
    assert main(["pathlines", str(root / "data"), "--config", str(cfg), "--probe", "MV", "--window", "2",
                 "--label", "LA", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "pathlines.vtp").stat().st_size > 0


def test_stats_command(tmp_path, capsys):
    rng = np.random.default_rng(1)
    rows = ["subject_id,group,age,KE"]
    for i in range(18):
        g = "ABC"[i % 3]
        rows.append(f"s{i},{g},{30 + i},{rng.normal() + 'ABC'.index(g) * 3}")
    (tmp_path / "t.csv").write_text("\n".join(rows) + "\n")
    assert main(["stats", "--table", str(tmp_path / "t.csv"), "--metric", "KE", "--posthoc",
                 "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "stats_KE.json").read_text())
    assert len(res["posthoc"]) == 3
    assert res["effects"]["group"]["p"] < 1e-3


def test_export_vti_command(case, tmp_path):
    root, _, _ = case
    assert main(["export-vti", str(root / "data"), "--field", "q_criterion", "--label", "LA",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "q_criterion.pvd").exists()
    assert len(list(tmp_path.glob("q_criterion_*.vti"))) == 40


def test_exit_code_config_error(case, tmp_path, capsys):
    root, _, _ = case
    assert main(["run"]) == 2
    assert main(["spectrogram", str(root / "data"), "--probe", "nowhere", "--out", str(tmp_path)]) == 2
    assert main(["metrics", str(root / "data"), "--threads", "0"]) == 2


def test_exit_code_data_error(tmp_path):
    assert main(["info", str(tmp_path / "missing")]) == 3
    assert main(["metrics", str(tmp_path / "missing")]) == 3


def test_exit_code_solver_error(case, tmp_path, monkeypatch):
    root, cfg, _ = case
    orig = pressure.conjugate_gradient
    monkeypatch.setattr(pressure, "conjugate_gradient", lambda A, b, **kw: orig(A, b, **dict(kw, maxiter=2)))
    assert main(["pressure", str(root / "data"), "--config", str(cfg), "--from", "inlet", "--to", "outlet",
                 "--labels", "LA", "--out", str(tmp_path)]) == 4
    d = json.loads(cfg.read_text())
    d["output"] = str(tmp_path / "run")
    (tmp_path / "c.json").write_text(json.dumps(d | {"dataset": str(root / "data")}))
    assert main(["run", "--config", str(tmp_path / "c.json")]) == 4
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["error"]["stage"] == "pressure"
    assert manifest["stages_completed"] == ["pcmra", "mask", "geometry", "metrics", "spectrograms"]


def _config(case, tmp_path, **over):
    root, cfg, _ = case
    d = json.loads(cfg.read_text())
    d.update(dataset=str(root / "data"), output=str(tmp_path / "out"))
    d.update(over)
    return RunConfig.from_dict(d)


def test_missing_probe_fails_before_compute(case, tmp_path):
    cfg = _config(case, tmp_path, pressure={"inlet": "inlet", "outlet": "ghost", "labels": ["LA"]})
    with pytest.raises(ConfigError):
        run_pipeline(cfg)
    assert not (tmp_path / "out" / "manifest.json").exists()
    assert not (tmp_path / "out" / "pcmra").exists()


def test_probe_outside_label_fails_before_compute(case, tmp_path):
    root, cfg, _ = case
    d = json.loads(cfg.read_text())
    d["probes"][0] = dict(d["probes"][0], center_mm=[0.0, 0.0, 10.0])
    cfg2 = _config(case, tmp_path, probes=d["probes"])
    with pytest.raises(ConfigError):
        run_pipeline(cfg2)
    assert not (tmp_path / "out" / "pcmra").exists()


def test_unknown_config_key(case, tmp_path):
    with pytest.raises(ConfigError):
        _config(case, tmp_path, colour="blue")
    with pytest.raises(ConfigError):
        run_pipeline(_config(case, tmp_path, stages=["pcmra", "dance"]))


def test_pcmra_only_run(case, tmp_path):
    cfg = _config(case, tmp_path, stages=["pcmra"])
    rep = run_pipeline(cfg)
    assert rep.stages == ["pcmra"]
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["manifest.json", "pcmra"]


def test_missing_dataset_is_config_error(case, tmp_path):
    cfg = _config(case, tmp_path)
    cfg.dataset = str(tmp_path / "nothing")
    with pytest.raises(ConfigError):
        run_pipeline(cfg)


@pytest.fixture(scope="module")
def full_runs(case, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for name, threads in (("a", 1), ("b", 1), ("c", 8)):
        d = json.loads(case[1].read_text())
        d.update(dataset=str(case[0] / "data"), output=str(root / name),
                 export={"q_criterion": True, "velocity": True})
        out[name] = run_pipeline(RunConfig.from_dict(d), threads=threads)
    return root, out


def test_pipeline_byte_identical(full_runs):
    root, _ = full_runs
    a, b, c = (_files(root / n) for n in "abc")
    for d in (a, b, c):
        d.pop("manifest.json")
    assert a.keys() == b.keys() == c.keys()
    assert len(a) > 20
    for k in a:
        assert a[k] == b[k], k
        assert a[k] == c[k], k


def test_pipeline_report_matches_truth(case, full_runs):
    truth = case[2]
    root, reps = full_runs
    flat = reps["a"].flat()
    assert flat["MV_E"] == pytest.approx(truth["E"]["flow_ml_s"], rel=0.02)
    assert flat["MV_A"] == pytest.approx(truth["A"]["flow_ml_s"], rel=0.02)
    assert flat["MV_E/A"] == pytest.approx(truth["E_over_A"], rel=0.02)
    assert flat["MV_E_vol"] == pytest.approx(truth["E"]["volume_ml"], rel=0.02)
    assert flat["LA_volume_ml_m2"] == pytest.approx(flat["LA_volume_ml"] / 1.8090, rel=1e-3)
    report = json.loads((root / "a" / "report.json").read_text())
    assert report["summary"] == json.loads(json.dumps(flat))
    manifest = json.loads((root / "a" / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert "report.json" in manifest["outputs"]


def test_pipeline_error_wraps_stage(case, tmp_path, monkeypatch):
    orig = pressure.conjugate_gradient
    monkeypatch.setattr(pressure, "conjugate_gradient", lambda A, b, **kw: orig(A, b, **dict(kw, maxiter=2)))
    with pytest.raises(PipelineError) as ei:
        run_pipeline(_config(case, tmp_path))
    assert ei.value.exit_code == 4
