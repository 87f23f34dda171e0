import numpy as np
import pytest

from semsplat.dataset_io import FrameRecord, Intrinsics, MaskRecord
from semsplat.gaussians import GaussianMap
from semsplat.scene_synth import SynthConfig, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    """A short 48x48 orbit, shared by the read-only tests."""
    return generate_scene(SynthConfig(height=48, width=48, n_frames=6, seed=3))


def random_map(rng, n, d=4, depth=(2.0, 6.0), spread=1.0, log_scale=(-3.0, -1.5)):
    """Gaussians scattered in front of an identity camera."""
    z = rng.uniform(*depth, size=n)
    xy = rng.uniform(-spread, spread, size=(n, 2)) * z[:, None] * 0.4
    q = rng.normal(size=(n, 4))
    return GaussianMap(
        means=np.column_stack([xy, z]),
        quats=q / np.linalg.norm(q, axis=1, keepdims=True),
        log_scales=rng.uniform(*log_scale, size=(n, 3)),
        opacity_logits=rng.normal(0.0, 1.5, size=n),
        color_logits=rng.normal(0.0, 1.0, size=(n, 3)),
        features=rng.normal(size=(n, d)),
    )


def make_intrinsics(h, w, f=None):
    f = f or 1.0 * w
    return Intrinsics(f, f, w / 2.0, h / 2.0, w, h)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def simple_frame(h=8, w=8, D=8, seed=0, depth=2.0):
    rng = np.random.default_rng(seed)
    intr = make_intrinsics(h, w)
    pm = intr.pixel_rays() * depth
    m = np.zeros((h, w), dtype=bool)
    m[: h // 2] = True
    e = unit(rng.normal(size=D))
    return FrameRecord(rng.random((h, w, 3)).astype(np.float32), pm.astype(np.float32),
                       np.ones((h, w), dtype=np.float32), [MaskRecord(m, 1, e.astype(np.float32), 0)])


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
