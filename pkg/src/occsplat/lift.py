"""Gaussians from the point cloud, with multi-view semantics lifted onto them."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import SENTINEL, CameraView, FrameBundle, GaussianSet, PipelineConfig, inverse_sigmoid

GRAY = 0.5


def _visible_pixels(points: np.ndarray, view: CameraView):
    """Visibility mask and integer pixels (col, row) of ``points`` in ``view``."""
    uv, z = view.project(points)
    with np.errstate(invalid="ignore"):
        vis = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < view.width) & (uv[:, 1] >= 0) & (uv[:, 1] < view.height)
    pix = np.zeros((len(z), 2), dtype=np.int64)
    pix[vis] = np.floor(uv[vis]).astype(np.int64)
    if view.sky_mask is not None and vis.any():
        vis[vis] &= ~view.sky_mask[pix[vis, 1], pix[vis, 0]]
    return vis, pix


def visibility(mu, view: CameraView) -> bool:
    vis, _ = _visible_pixels(np.asarray(mu, dtype=np.float64).reshape(1, 3), view)
    return bool(vis[0])


def _lift(points: np.ndarray, views: Sequence[CameraView], num_classes: int):
    """Per-point semantic sums, label counts, color sums and color counts."""
    n = len(points)
    sem = np.zeros((n, num_classes))
    count = np.zeros(n)
    rgb = np.zeros((n, 3))
    rgb_count = np.zeros(n)
    rows = np.arange(n)
    for view in views:
        vis, pix = _visible_pixels(points, view)
        idx = rows[vis]
        px = pix[vis]
        labels = view.sem_mask[px[:, 1], px[:, 0]]
        labeled = (labels != SENTINEL) & (labels <= num_classes)
        sem[idx[labeled], labels[labeled] - 1] += 1.0
        count[idx[labeled]] += 1.0
        rgb[idx] += view.image[px[:, 1], px[:, 0]]
        rgb_count[idx] += 1.0
    return sem, count, rgb, rgb_count


def _normalize_or_uniform(sem: np.ndarray) -> np.ndarray:
    total = sem.sum(axis=1, keepdims=True)
    c = sem.shape[1]
    uniform = np.full_like(sem, 1.0 / c)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, sem / total, uniform)
    return out


def lift_semantics(centers: np.ndarray, views: Sequence[CameraView], num_classes: int) -> np.ndarray:
    """Average one-hot mask labels over the views that see each center.

    Only views where the center is visible and the mask pixel is labeled
    take part; centers with no such view get the uniform distribution.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    sem, _, _, _ = _lift(centers, views, num_classes)
    return _normalize_or_uniform(sem)


def instantiate_gaussians(frame: FrameBundle, cfg: PipelineConfig, num_classes: int) -> GaussianSet:
    """One Gaussian per occupied ``delta`` cell of the frame's point cloud.

    Each Gaussian sits at the centroid of its cell's points. Its semantics
    are the renormalized mean of the per-point lifted distributions, and its
    color is the mean image color over all visible (point, view) samples,
    gray when no view sees the cell. Points outside the grid are dropped.
    """
    grid = cfg.grid
    delta = grid.delta
    pts = frame.points
    idx, inside = grid.cells(pts)
    pts, idx = pts[inside], idx[inside]
    if len(pts) == 0:
        return GaussianSet.empty(num_classes, delta)

    dims = np.array(grid.dims, dtype=np.int64)
    flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    cells, inv = np.unique(flat, return_inverse=True)
    k = len(cells)
    counts = np.bincount(inv, minlength=k).astype(np.float64)
    mu = np.stack([np.bincount(inv, weights=pts[:, a], minlength=k) for a in range(3)], axis=1) / counts[:, None]

    sem_pts, label_count, rgb_pts, rgb_count = _lift(pts, frame.views, num_classes)
    point_sem = _normalize_or_uniform(sem_pts)
    sem = np.zeros((k, num_classes))
    np.add.at(sem, inv, point_sem)
    sem /= sem.sum(axis=1, keepdims=True)

    rgb = np.zeros((k, 3))
    np.add.at(rgb, inv, rgb_pts)
    seen = np.bincount(inv, weights=rgb_count, minlength=k)
    color = np.full((k, 3), GRAY)
    color[seen > 0] = rgb[seen > 0] / seen[seen > 0, None]

    quat = np.zeros((k, 4))
    quat[:, 0] = 1.0
    return GaussianSet(
        mu=mu,
        scale_raw=np.zeros((k, 3)),
        quat=quat,
        opacity_raw=np.full(k, inverse_sigmoid(cfg.init_opacity)),
        color=np.clip(color, 0.0, 1.0),
        sem=sem,
        t=np.full(k, frame.t),
        delta=delta,
    )
