import numpy as np
import pytest

from laflow.core import Dataset, GridMeta, Mask, ScalarVolume, VelocityField


def make_dataset(data, spacing=(1.0, 1.0, 1.0), dt=40.0, venc=150.0, labels=None, magnitude=None,
                 origin=(0.0, 0.0, 0.0), direction=None):
    """Dataset from a (3, nt, nz, ny, nx) velocity array."""
    data = np.asarray(data, dtype=np.float32)
    _, nt, nz, ny, nx = data.shape
    kw = {} if direction is None else {"direction": tuple(np.ravel(direction))}
    meta = GridMeta((nx, ny, nz, nt), spacing, origin, dt=dt, venc=venc, **kw)
    mag = np.ones((nt, nz, ny, nx), np.float32) if magnitude is None else np.asarray(magnitude, np.float32)
    mask = None
    if labels is not None:
        mask = Mask(meta.with_nt(1), np.asarray(labels, dtype=np.uint8))
    return Dataset(VelocityField(meta, data), ScalarVolume(meta, mag, "a.u.", "magnitude"), mask)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pipeline_case(root, grid=(24, 24, 40), nt=40, dt_ms=25.0, **cfg_extra):
    """Write a biphasic tube dataset and a full run configuration under ``root``."""
    import json

    from laflow.synth import SynthSpec, write

    spec = SynthSpec("biphasic_inflow", grid=grid, nt=nt, dt_ms=dt_ms, profile="poiseuille")
    write(spec, root / "data")
    truth = json.loads((root / "data" / "truth.json").read_text())
    cfg = {
        "dataset": "data",
        "output": "out",
        "probes": [dict(p, label="LA") for p in truth["probes"]],
        "pressure": {"inlet": "inlet", "outlet": "outlet", "labels": ["LA"]},
        "spectrogram": {"probes": ["MV"]},
        "subject": {"weight_kg": 70, "height_cm": 170},
    }
    cfg.update(cfg_extra)
    path = root / "config.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path, truth


ACCEPTANCE_LINES = []


class _Criterion:
    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} {status}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        if exc_type is not None and exc is not None:
            line += f" -- {str(exc).splitlines()[0] if str(exc) else exc_type.__name__}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
