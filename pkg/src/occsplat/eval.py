"""Occupancy metrics against ground-truth grids and the trailing-artifact score."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import SENTINEL, VoxelGrid, yaw_matrix


def _check_same(pred: VoxelGrid, gt: VoxelGrid) -> None:
    if pred.spec.to_dict() != gt.spec.to_dict() or pred.labels.shape != gt.labels.shape:
        raise ValueError("pred and gt must share one grid spec")


def iou_per_class(pred: VoxelGrid, gt: VoxelGrid, mask: Optional[np.ndarray] = None, num_classes: Optional[int] = None):
    """Per-class IoU over the masked voxels and their mean.

    Returns ``(ious, miou)`` where ``ious`` maps class id to IoU for every
    class present in pred or gt inside the mask; classes absent from both
    are left out. ``miou`` is NaN when no class is defined.
    """
    _check_same(pred, gt)
    p, g = pred.labels, gt.labels
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        p, g = p[mask], g[mask]
    if num_classes is None:
        num_classes = max(pred.spec.num_classes, gt.spec.num_classes, int(p.max(initial=0)), int(g.max(initial=0)))
    ious = {}
    for c in range(1, num_classes + 1):
        pc, gc = p == c, g == c
        union = int(np.count_nonzero(pc | gc))
        if union:
            ious[c] = np.count_nonzero(pc & gc) / union
    miou = float(np.mean(list(ious.values()))) if ious else float("nan")
    return ious, miou


def binary_iou(pred: VoxelGrid, gt: VoxelGrid, mask: Optional[np.ndarray] = None) -> float:
    """IoU of occupied-vs-empty, ignoring classes."""
    _check_same(pred, gt)
    p, g = pred.occupied, gt.occupied
    if mask is not None:
        p, g = p[mask], g[mask]
    union = np.count_nonzero(p | g)
    return float(np.count_nonzero(p & g) / union) if union else float("nan")


@dataclass(frozen=True)
class OrientedBox:
    center: tuple
    size: tuple  # (length along heading, width, height)
    yaw: float = 0.0

    def local(self, points: np.ndarray) -> np.ndarray:
        """Points in the box frame (x along the heading)."""
        R = yaw_matrix(self.yaw)
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) @ R

    def contains(self, points: np.ndarray) -> np.ndarray:
        half = 0.5 * np.asarray(self.size)
        return np.all(np.abs(self.local(points)) <= half + 1e-9, axis=-1)


def trailing_score(pred: VoxelGrid, gt_box: OrientedBox, motion_dir, dynamic_classes: Sequence[int]) -> float:
    """Fraction of predicted dynamic-class voxels smeared behind the moving box.

    The trailing region spans two box lengths behind the box along
    ``-motion_dir`` with the box's cross-section. The denominator counts all
    predicted dynamic-class voxels; no such voxels gives 0.
    """
    dyn = np.isin(pred.labels, list(dynamic_classes))
    n = int(dyn.sum())
    if n == 0:
        return 0.0
    centers = pred.spec.centers(np.argwhere(dyn))
    d = np.asarray(motion_dir, dtype=np.float64)
    d = d / np.linalg.norm(d)
    # box frame whose x axis is the motion direction
    yaw = np.arctan2(d[1], d[0])
    R = yaw_matrix(yaw)
    local = (centers - np.asarray(gt_box.center)) @ R
    extent = np.abs(R.T @ yaw_matrix(gt_box.yaw) @ np.diag(gt_box.size)).sum(axis=1)  # box bbox in the motion frame
    half = 0.5 * extent
    inside = gt_box.contains(centers)
    cross = (np.abs(local[:, 1]) <= half[1] + 1e-9) & (np.abs(local[:, 2]) <= half[2] + 1e-9)
    behind = (local[:, 0] < -half[0] + 1e-9) & (local[:, 0] >= -half[0] - 2 * extent[0] - 1e-9)
    return float(np.count_nonzero(~inside & cross & behind) / n)


def static_diff_fraction(a: VoxelGrid, b: VoxelGrid, static_classes: Sequence[int]) -> float:
    """Voxels that change label where either grid holds a static class, over occupied voxels of ``a``."""
    _check_same(a, b)
    static = np.isin(a.labels, list(static_classes)) | np.isin(b.labels, list(static_classes))
    changed = np.count_nonzero((a.labels != b.labels) & static)
    occ = np.count_nonzero(a.occupied)
    return float(changed / occ) if occ else 0.0


def metrics(pred: VoxelGrid, gt: VoxelGrid, mask: Optional[np.ndarray] = None, class_names: Sequence[str] = ()) -> dict:
    ious, miou = iou_per_class(pred, gt, mask, num_classes=max(len(class_names), pred.spec.num_classes) or None)
    names = {i: n for i, n in enumerate(class_names, start=1)}
    region = np.ones(pred.labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    counts = {}
    for c in sorted(set(np.unique(pred.labels[region])) | set(np.unique(gt.labels[region]))):
        if c == SENTINEL:
            continue
        counts[names.get(int(c), str(int(c)))] = {
            "pred": int(np.count_nonzero(pred.labels[region] == c)),
            "gt": int(np.count_nonzero(gt.labels[region] == c)),
        }
    return {
        "iou": {names.get(c, str(c)): v for c, v in ious.items()},
        "miou": miou,
        "binary_iou": binary_iou(pred, gt, mask),
        "voxel_counts": counts,
        "evaluated_voxels": int(region.sum()),
    }


def write_metrics(path, data: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path
