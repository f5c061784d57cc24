import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

import oracles
from conftest import fd_scene, look_at, random_gaussians, simple_view
from occsplat.core import FrameBundle, Gaussian, GaussianSet, GridSpec, PipelineConfig, inverse_sigmoid
from occsplat.splat import (
    MAX_ALPHA,
    PIXEL_FLOOR,
    density,
    frame_loss,
    loss_and_gradients,
    project_gaussian,
    render_view,
    save_render,
)

seeds = st.integers(0, 2**31 - 1)


def unit_gaussian(mu=(0, 0, 0), s=1.0, opacity=0.5, color=(1, 0, 0)):
    raw = inverse_sigmoid(np.asarray(s, dtype=float) * np.ones(3) / 2.0)
    return Gaussian(np.asarray(mu, float), raw, np.array([1.0, 0, 0, 0]), inverse_sigmoid(opacity),
                    np.asarray(color, float), np.ones(1), 0, 1.0)


def axis_view(focal=30.0, size=32, z_offset=10.0):
    """Camera at the origin looking down +z of a world offset so mu = 0 sits ``z_offset`` ahead."""
    E = np.hstack([np.eye(3), [[0.0], [0.0], [z_offset]]])
    v = simple_view(E, size=size, focal=focal)
    # principal point on a pixel center
    v.intrinsics[0, 2] = v.intrinsics[1, 2] = size / 2 + 0.5
    return v


def test_density_examples():
    g = unit_gaussian()
    assert density(g, g.mu) == 1.0
    assert density(g, [1, 0, 0]) == pytest.approx(np.exp(-0.5))
    aniso = unit_gaussian(s=[2.0, 1.0, 1.0])
    aniso.delta = 2.0
    aniso.scale_raw = inverse_sigmoid(np.array([2.0, 1.0, 1.0]) / 4.0)
    assert density(aniso, [2, 0, 0]) == pytest.approx(np.exp(-0.5))


def test_projection_on_axis():
    f = 50.0
    uv, cov2, z = project_gaussian(unit_gaussian(), axis_view(focal=f))
    np.testing.assert_allclose(uv, [16.5, 16.5])
    np.testing.assert_allclose(cov2, ((f / 10) ** 2 + PIXEL_FLOOR) * np.eye(2), atol=1e-12)
    assert z == 10.0


def test_projection_behind_camera():
    assert project_gaussian(unit_gaussian(mu=(0, 0, -20)), axis_view()) is None


def test_projection_focal_scaling():
    # doubling the focal length doubles each projected standard deviation
    g = unit_gaussian(mu=(0.3, -0.2, 0.5), s=[1.0, 0.5, 0.8])
    _, c1, _ = project_gaussian(g, axis_view(focal=40.0))
    _, c2, _ = project_gaussian(g, axis_view(focal=80.0))
    d1 = np.linalg.det(c1 - PIXEL_FLOOR * np.eye(2))
    d2 = np.linalg.det(c2 - PIXEL_FLOOR * np.eye(2))
    assert d2 ** 0.25 == pytest.approx(2 * d1 ** 0.25, rel=1e-9)


def test_render_empty():
    out = render_view(GaussianSet.empty(1, 1.0), axis_view())
    assert not out.color.any() and not out.depth.any() and not out.alpha.any()


def test_render_single_opaque():
    g = unit_gaussian(opacity=1 - 1e-12, color=(0.2, 0.4, 0.6))
    out = render_view(GaussianSet.from_gaussians([g], 1, 1.0), axis_view())
    np.testing.assert_allclose(out.color[16, 16], [0.2, 0.4, 0.6], atol=1e-5)
    assert out.depth[16, 16] == pytest.approx(10.0)
    assert out.alpha[16, 16] == pytest.approx(MAX_ALPHA)


def test_render_front_occludes_back():
    red = unit_gaussian(mu=(0, 0, 0), s=0.5, opacity=0.999, color=(1, 0, 0))
    blue = unit_gaussian(mu=(0, 0, 3), s=0.5, opacity=0.9, color=(0, 0, 1))
    for order in ([red, blue], [blue, red]):
        out = render_view(GaussianSet.from_gaussians(order, 1, 1.0), axis_view())
        np.testing.assert_allclose(out.color[16, 16], [1, 0, 0], atol=2e-3)


def random_view(rng, size=24):
    cam = rng.normal(size=3)
    cam = 4.0 * cam / np.linalg.norm(cam)
    if abs(cam[2]) > 3.5:
        cam[2] = 3.5 * np.sign(cam[2])
    return simple_view(look_at(cam, rng.normal(scale=0.2, size=3)), size=size, focal=rng.uniform(15, 40))


@given(seeds, st.integers(1, 8), st.sampled_from([2.0, 3.0, 5.0]))
def test_render_matches_oracle(seed, k, trunc):
    rng = np.random.default_rng(seed)
    gs = random_gaussians(rng, k, spread=0.8)
    view = random_view(rng)
    out = render_view(gs, view, trunc)
    C, D, A = oracles.render(gs, view, trunc)
    np.testing.assert_allclose(out.color, C, atol=1e-9)
    np.testing.assert_allclose(out.alpha, A, atol=1e-9)
    np.testing.assert_allclose(out.depth, D, atol=1e-7)


@given(seeds)
def test_render_invariants(seed):
    rng = np.random.default_rng(seed)
    gs = random_gaussians(rng, 6, spread=0.8)
    view = random_view(rng)
    out = render_view(gs, view)
    assert np.all(out.alpha >= 0) and np.all(out.alpha <= 1)
    assert np.all(out.depth[out.alpha > 0] >= 0)
    perm = rng.permutation(len(gs))
    shuffled = render_view(gs.subset(perm), view)
    np.testing.assert_allclose(shuffled.color, out.color, atol=1e-12)
    np.testing.assert_allclose(shuffled.depth, out.depth, atol=1e-12)
    # shrinking every opacity shrinks every alpha
    prev = out.alpha
    for shift in (1.0, 3.0, 10.0):
        dim = gs.copy()
        dim.opacity_raw -= shift
        alpha = render_view(dim, view).alpha
        assert np.all(alpha <= prev + 1e-15)
        prev = alpha
    assert prev.max() < 1e-3


def test_zero_residual_gives_zero_loss_and_gradient():
    gs, frame = fd_scene(3)
    cfg = PipelineConfig(grid=GridSpec((-5, 5), (-5, 5), (-5, 5), 0.4, 3))
    views = []
    for v in frame.views:
        out = render_view(gs, v, cfg.trunc_mahal)
        rows, cols = np.nonzero(out.alpha > 0.01)
        uv = np.stack([cols, rows], axis=1) + 0.5
        views.append(simple_view(v.extrinsics, image=out.color, sky=v.sky_mask, depth_uv=uv, depth=out.depth[rows, cols]))
    loss, grads = loss_and_gradients(gs, FrameBundle(0, np.zeros((0, 3)), np.eye(4), views), cfg)
    assert loss == 0.0
    assert all(not a.any() for a in grads.arrays().values())


def test_lambda_zero_ignores_depth():
    gs, frame = fd_scene(4)
    cfg = PipelineConfig(grid=GridSpec((-5, 5), (-5, 5), (-5, 5), 0.4, 3), lambda_depth=0.0)
    base, _ = loss_and_gradients(gs, frame, cfg)
    for v in frame.views:
        v.depth = v.depth * 3.0
    moved, grads = loss_and_gradients(gs, frame, cfg)
    assert moved == base and grads.depth == 0.0


def test_loss_matches_oracle_and_frame_loss():
    gs, frame = fd_scene(5)
    cfg = PipelineConfig(grid=GridSpec((-5, 5), (-5, 5), (-5, 5), 0.4, 3), lambda_depth=0.7)
    loss, grads = loss_and_gradients(gs, frame, cfg)
    assert loss == pytest.approx(oracles.frame_loss(gs, frame, 0.7), rel=1e-12)
    assert loss == pytest.approx(frame_loss(gs, frame, cfg), rel=1e-12)
    assert loss == pytest.approx(grads.photo + grads.depth, rel=1e-12)
    assert grads.is_finite()


def test_semantics_receive_no_gradient():
    gs, frame = fd_scene(6)
    cfg = PipelineConfig(grid=GridSpec((-5, 5), (-5, 5), (-5, 5), 0.4, 3))
    _, grads = loss_and_gradients(gs, frame, cfg)
    assert "sem" not in grads.arrays()


def test_gradients_match_finite_differences_small():
    # a lighter version of the acceptance check: opacity and color only, default truncation
    gs, frame = fd_scene(7)
    cfg = PipelineConfig(grid=GridSpec((-5, 5), (-5, 5), (-5, 5), 0.4, 3), lambda_depth=0.5)
    _, grads = loss_and_gradients(gs, frame, cfg)
    h = 1e-5
    for name in ("opacity_raw", "color"):
        arr = getattr(gs, name)
        for ix in np.ndindex(arr.shape):
            p, m = gs.copy(), gs.copy()
            getattr(p, name)[ix] += h
            getattr(m, name)[ix] -= h
            fd = (frame_loss(p, frame, cfg) - frame_loss(m, frame, cfg)) / (2 * h)
            assert getattr(grads, name)[ix] == pytest.approx(fd, rel=1e-3, abs=1e-7)


def test_empty_set_loss():
    _, frame = fd_scene(8)
    cfg = PipelineConfig(grid=GridSpec((-5, 5), (-5, 5), (-5, 5), 0.4, 3))
    loss, grads = loss_and_gradients(GaussianSet.empty(3, 0.4), frame, cfg)
    assert loss > 0 and grads.mu.shape == (0, 3)


def test_save_render(tmp_path):
    gs, frame = fd_scene(9)
    out = render_view(gs, frame.views[0])
    save_render(out, tmp_path / "r" / "v0", max_depth=10.0)
    rgb = np.array(Image.open(tmp_path / "r" / "v0_color.png"))
    depth = np.array(Image.open(tmp_path / "r" / "v0_depth.png"))
    assert rgb.shape == (32, 32, 3) and rgb.dtype == np.uint8
    assert depth.shape == (32, 32) and depth.max() > 0
