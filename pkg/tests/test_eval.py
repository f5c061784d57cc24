import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occsplat.core import GridSpec, VoxelGrid
from occsplat.eval import (
    OrientedBox,
    binary_iou,
    iou_per_class,
    metrics,
    static_diff_fraction,
    trailing_score,
    write_metrics,
)

GRID = GridSpec((-4.0, 4.0), (-2.0, 2.0), (0.0, 2.0), 0.2, num_classes=3)
seeds = st.integers(0, 2**31 - 1)


def grid_with(cells, label):
    g = VoxelGrid.empty(GRID)
    for c in cells:
        g.labels[tuple(c)] = label
    return g


def test_identical_grids_score_one(rng):
    g = VoxelGrid(GRID, rng.integers(0, 4, GRID.dims).astype(np.uint8))
    ious, miou = iou_per_class(g, g)
    assert set(ious) == {1, 2, 3} and all(v == 1.0 for v in ious.values()) and miou == 1.0


def test_disjoint_class_scores_zero():
    ious, miou = iou_per_class(grid_with([(0, 0, 0)], 2), grid_with([(1, 0, 0)], 2))
    assert ious == {2: 0.0} and miou == 0.0


def test_four_of_twelve():
    pred = grid_with([(i, 0, 0) for i in range(8)], 1)
    gt = grid_with([(i, 0, 0) for i in range(4, 12)], 1)
    ious, _ = iou_per_class(pred, gt)
    assert ious[1] == pytest.approx(4 / 12)
    assert binary_iou(pred, gt) == pytest.approx(4 / 12)


def test_undefined_classes_excluded_and_mask():
    pred = grid_with([(0, 0, 0)], 1)
    gt = grid_with([(0, 0, 0)], 1)
    gt.labels[5, 5, 5] = 3
    ious, miou = iou_per_class(pred, gt)
    assert ious == {1: 1.0, 3: 0.0} and miou == 0.5
    mask = np.zeros(GRID.dims, dtype=bool)
    mask[0, 0, 0] = True
    assert iou_per_class(pred, gt, mask) == ({1: 1.0}, 1.0)
    _, empty = iou_per_class(VoxelGrid.empty(GRID), VoxelGrid.empty(GRID))
    assert np.isnan(empty)


def test_spec_mismatch_raises():
    with pytest.raises(ValueError):
        iou_per_class(VoxelGrid.empty(GRID), VoxelGrid.empty(GRID.with_delta(0.4)))


@given(seeds)
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = VoxelGrid(GRID, rng.integers(0, 4, GRID.dims).astype(np.uint8))
    b = VoxelGrid(GRID, np.where(rng.uniform(size=GRID.dims) < 0.3, rng.integers(0, 4, GRID.dims), a.labels).astype(np.uint8))
    ab, m_ab = iou_per_class(a, b)
    ba, m_ba = iou_per_class(b, a)
    assert ab == ba and m_ab == m_ba
    assert 0 <= m_ab <= 1
    assert (m_ab == 1) == bool(np.all(a.labels == b.labels))


# faces on voxel boundaries so no voxel center sits on a face
BOX = OrientedBox((1.0, 0.0, 0.6), (1.2, 0.8, 0.8))


def box_cells(box, shift=0.0):
    centers = GRID.center_grid().reshape(-1, 3)
    inside = box.contains(centers - [shift, 0, 0])
    return np.argwhere(inside.reshape(GRID.dims))


def test_trailing_examples():
    cells = box_cells(BOX)
    assert len(cells) == 6 * 4 * 4
    assert trailing_score(grid_with(cells, 3), BOX, [1, 0, 0], [3]) == 0.0
    # the box plus an equal-volume copy directly behind it
    tail = box_cells(BOX, shift=-1.2)
    pred = grid_with(np.vstack([cells, tail]), 3)
    assert trailing_score(pred, BOX, [1, 0, 0], [3]) == pytest.approx(0.5)
    # ahead of the box is not trailing
    ahead = grid_with(np.vstack([cells, box_cells(BOX, shift=1.2)]), 3)
    assert trailing_score(ahead, BOX, [1, 0, 0], [3]) == 0.0
    assert trailing_score(VoxelGrid.empty(GRID), BOX, [1, 0, 0], [3]) == 0.0
    # other classes are ignored
    assert trailing_score(grid_with(tail, 1), BOX, [1, 0, 0], [3]) == 0.0


def test_trailing_window_is_two_lengths():
    cells = box_cells(BOX)
    far = box_cells(BOX, shift=-3.6)  # starts three box lengths behind
    assert trailing_score(grid_with(np.vstack([cells, far]), 3), BOX, [1, 0, 0], [3]) == 0.0
    near = box_cells(BOX, shift=-2.4)  # occupies the second length
    assert trailing_score(grid_with(np.vstack([cells, near]), 3), BOX, [1, 0, 0], [3]) == pytest.approx(0.5)


def test_static_diff_fraction():
    a = grid_with([(i, 0, 0) for i in range(10)], 1)
    b = VoxelGrid(GRID, a.labels.copy())
    assert static_diff_fraction(a, b, [1, 2]) == 0.0
    b.labels[0, 0, 0] = 0
    b.labels[0, 5, 5] = 3  # dynamic-only change does not count
    assert static_diff_fraction(a, b, [1, 2]) == pytest.approx(0.1)
    assert static_diff_fraction(VoxelGrid.empty(GRID), b, [1]) == 0.0


def test_metrics_json(tmp_path):
    pred = grid_with([(i, 0, 0) for i in range(8)], 1)
    gt = grid_with([(i, 0, 0) for i in range(4, 12)], 1)
    data = metrics(pred, gt, class_names=["ground", "building", "car"])
    path = write_metrics(tmp_path / "m.json", data)
    back = json.loads(path.read_text())
    assert back["iou"] == {"ground": pytest.approx(1 / 3)}
    assert back["voxel_counts"] == {"ground": {"pred": 8, "gt": 8}}
    assert back["evaluated_voxels"] == GRID.num_voxels
    assert back["miou"] == pytest.approx(1 / 3)
