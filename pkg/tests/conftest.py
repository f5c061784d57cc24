import functools

import numpy as np
import pytest
from hypothesis import settings

from occsplat import synth
from occsplat.core import CameraView, FrameBundle, GaussianSet, GridSpec, PipelineConfig, normalize_quats

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("default")


def look_at(cam_pos, target):
    """World-to-camera [R | t] for a camera at ``cam_pos`` looking at ``target`` (x right, y down)."""
    cam_pos = np.asarray(cam_pos, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - cam_pos
    f /= np.linalg.norm(f)
    r = np.cross(f, [0.0, 0.0, 1.0])
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return np.hstack([R, (-R @ cam_pos)[:, None]])


def simple_view(E, size=32, focal=30.0, image=None, mask=None, sky=None, depth_uv=None, depth=None):
    K = np.array([[focal, 0.0, size / 2], [0.0, focal, size / 2], [0.0, 0.0, 1.0]])
    image = np.zeros((size, size, 3)) if image is None else image
    mask = np.zeros((size, size), dtype=int) if mask is None else mask
    return CameraView(
        K, E, size, size, image, mask, sky,
        np.zeros((0, 2)) if depth_uv is None else depth_uv,
        np.zeros(0) if depth is None else depth,
    )


def random_gaussians(rng, k, num_classes=3, delta=0.4, spread=0.3):
    return GaussianSet(
        mu=rng.normal(scale=spread, size=(k, 3)),
        scale_raw=rng.normal(scale=0.5, size=(k, 3)),
        quat=normalize_quats(rng.normal(size=(k, 4))),
        opacity_raw=rng.normal(size=k),
        color=rng.uniform(size=(k, 3)),
        sem=rng.dirichlet(np.ones(num_classes), size=k),
        t=np.zeros(k, dtype=int),
        delta=delta,
    )


def asymmetric_cluster(rng, n=200):
    """An L-shaped blob with a bump; no rotational symmetry."""
    arm1 = rng.uniform([0, 0, 0], [2.0, 0.4, 0.6], (n // 2, 3))
    arm2 = rng.uniform([0, 0.4, 0], [0.4, 1.4, 0.6], (n // 2 - 10, 3))
    bump = rng.uniform([1.5, 0, 0.6], [2.0, 0.4, 1.0], (10, 3))
    return np.vstack([arm1, arm2, bump]) - [0.7, 0.5, 0.3]


def fd_scene(seed=1):
    """Three random Gaussians seen by two 32x32 views with random targets."""
    rng = np.random.default_rng(seed)
    views = []
    for cam in ([-4.0, 0.3, 0.5], [0.5, -4.0, 0.2]):
        sky = np.zeros((32, 32), dtype=bool)
        sky[:3] = True
        views.append(
            simple_view(
                look_at(cam, [0, 0, 0]),
                image=rng.uniform(0.1, 0.9, (32, 32, 3)),
                sky=sky,
                depth_uv=rng.uniform(0, 32, (40, 2)),
                depth=rng.uniform(3, 5, 40),
            )
        )
    frame = FrameBundle(0, np.zeros((0, 3)), np.eye(4), views)
    gs = random_gaussians(rng, 3)
    return gs, frame


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return GridSpec((-2.0, 2.0), (-2.0, 2.0), (-1.0, 1.0), 0.2, num_classes=3)


@pytest.fixture
def small_cfg(small_grid):
    return PipelineConfig(grid=small_grid)


@functools.lru_cache(maxsize=None)
def synth_frame(kind="moving", t=2, **kw):
    """Cached synthetic frames; ``kind`` picks one of the stock scenes."""
    if kind == "moving":
        scene = synth.moving_box_scene(**kw)
    elif kind == "static":
        scene = synth.moving_box_scene(moving=False, **kw)
    elif kind == "vocabulary":
        scene = synth.vocabulary_scene(**kw)
    else:
        raise ValueError(kind)
    return scene, synth.generate_frame(scene, t)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` logs one acceptance line, then asserts ``ok``."""
    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
