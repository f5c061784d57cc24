import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import look_at, simple_view
from occsplat.core import FrameBundle, GridSpec, PipelineConfig
from occsplat.lift import instantiate_gaussians, lift_semantics, visibility

C = 5


def labeled_view(cam, label, size=16, sky=None):
    v = simple_view(look_at(cam, [0, 0, 0]), size=size, mask=np.full((size, size), label), sky=sky)
    v.image[:] = [label / 10, 0.2, 0.3]
    return v


def test_visibility_center_and_behind():
    v = labeled_view([-5, 0, 0], 1)
    assert visibility([0, 0, 0], v)
    assert not visibility([-10, 0, 0], v)


def test_visibility_sky_masked():
    sky = np.zeros((16, 16), dtype=bool)
    sky[8, 8] = True
    v = labeled_view([-5, 0, 0], 1, sky=sky)
    # the origin projects to the principal point (8, 8)
    assert not visibility([0, 0, 0], v)
    assert visibility([0, 0.5, 0.5], v)


def test_lift_unanimous_split_and_invisible():
    a, b = labeled_view([-5, 0, 0], 3), labeled_view([0, -5, 0], 3)
    np.testing.assert_allclose(lift_semantics([[0, 0, 0]], [a, b], C), [np.eye(C)[2]])
    b5 = labeled_view([0, -5, 0], 5)
    np.testing.assert_allclose(lift_semantics([[0, 0, 0]], [a, b5], C), [[0, 0, 0.5, 0, 0.5]])
    np.testing.assert_allclose(lift_semantics([[0, 0, -20]], [a, b5], C), [np.full(C, 1 / C)])


def test_lift_ignores_sentinel_views():
    a, unlabeled = labeled_view([-5, 0, 0], 2), labeled_view([0, -5, 0], 0)
    np.testing.assert_allclose(lift_semantics([[0, 0, 0]], [a, unlabeled], C), [np.eye(C)[1]])


@pytest.fixture
def cfg():
    return PipelineConfig(grid=GridSpec((-2, 2), (-2, 2), (-1, 1), 0.5, C))


def frame_of(points, views):
    return FrameBundle(4, points, np.eye(4), views)


def test_full_merge_into_one_cell(cfg, rng):
    pts = rng.uniform(0.01, 0.49, (100, 3))
    gs = instantiate_gaussians(frame_of(pts, [labeled_view([-5, 0, 0], 1)]), cfg, C)
    assert len(gs) == 1
    np.testing.assert_allclose(gs.mu[0], pts.mean(axis=0))
    np.testing.assert_allclose(gs.scales(), 0.5, atol=1e-9)
    np.testing.assert_allclose(gs.opacities(), 0.1)
    np.testing.assert_array_equal(gs.quat, [[1, 0, 0, 0]])
    assert gs.t[0] == 4


def test_two_cells_two_gaussians(cfg):
    gs = instantiate_gaussians(frame_of([[0.1, 0.1, 0.1], [1.1, 0.1, 0.1]], [labeled_view([-5, 0, 0], 1)]), cfg, C)
    assert len(gs) == 2


def test_merge_rule_averages_point_semantics(cfg):
    # each point sees one labeled view: merged semantics average the one-hots
    v1 = labeled_view([0.1, -5, 0.2], 1, size=64)
    v1.sem_mask[:] = 0
    v2 = labeled_view([0.1, -5, 0.2], 2, size=64)
    v2.sem_mask[:] = 0
    pts = np.array([[0.05, 0.1, 0.2], [0.4, 0.1, 0.2]])
    (u0, _), (u1, _) = v1.project(pts)[0]
    v1.sem_mask[:, int(u0)] = 1
    v2.sem_mask[:, int(u1)] = 2
    gs = instantiate_gaussians(frame_of(pts, [v1, v2]), cfg, C)
    np.testing.assert_allclose(gs.sem[0], [0.5, 0.5, 0, 0, 0])


def test_invisible_cell_is_gray_uniform(cfg):
    behind = labeled_view([-5, 0, 0], 1)
    behind.extrinsics = look_at([-5, 0, 0], [-10, 0, 0])
    gs = instantiate_gaussians(frame_of([[0.1, 0.1, 0.1]], [behind]), cfg, C)
    np.testing.assert_allclose(gs.color, [[0.5, 0.5, 0.5]])
    np.testing.assert_allclose(gs.sem, [np.full(C, 1 / C)])


def test_empty_cloud(cfg):
    gs = instantiate_gaussians(frame_of(np.zeros((0, 3)), [labeled_view([-5, 0, 0], 1)]), cfg, C)
    assert len(gs) == 0 and gs.num_classes == C


@given(st.integers(0, 2**31 - 1), st.integers(1, 300))
def test_instantiate_invariants(seed, n):
    rng = np.random.default_rng(seed)
    cfg = PipelineConfig(grid=GridSpec((-2, 2), (-2, 2), (-1, 1), 0.5, C))
    views = [labeled_view([-5, 0, 0], 1), labeled_view([0, -5, 0], 4)]
    views[0].sem_mask = rng.integers(0, C + 1, (16, 16))
    pts = rng.uniform([-2, -2, -1], [2, 2, 1], (n, 3)) * 0.999
    gs = instantiate_gaussians(frame_of(pts, views), cfg, C)
    idx, _ = cfg.grid.cells(pts)
    assert len(gs) == len({tuple(i) for i in idx}) <= n
    np.testing.assert_allclose(gs.sem.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(gs.scales(), cfg.grid.delta, atol=1e-9)
    # re-instantiating from the centroids reproduces them
    again = instantiate_gaussians(frame_of(gs.mu, views), cfg, C)
    np.testing.assert_allclose(np.sort(again.mu, axis=0), np.sort(gs.mu, axis=0), atol=1e-12)
