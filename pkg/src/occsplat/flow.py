"""Rigid per-cluster scene flow, dynamic propagation, and the static queue.

Between two frames, ground Gaussians are removed with a RANSAC plane fit,
the rest are grouped by density clustering, clusters are associated by
centroid, and every matched pair is registered with ICP. The resulting
rigid motion gives each previous Gaussian a flow vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import GaussianSet, GridSpec, PipelineConfig, yaw_matrix

NOISE = -1
GROUND = -2


@dataclass
class FlowField:
    vectors: np.ndarray  # (n_prev, 3)
    cluster_of: np.ndarray  # (n_prev,) cluster id, NOISE or GROUND
    transforms: dict = field(default_factory=dict)  # (prev_cluster, curr_cluster) -> (R, t)

    @classmethod
    def zeros(cls, n: int) -> "FlowField":
        return cls(np.zeros((n, 3)), np.full(n, NOISE, dtype=np.int64))

    @property
    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)

    def dynamic_mask(self, tau: float) -> np.ndarray:
        return self.magnitude >= tau


# ---------------------------------------------------------------------------
# Ground removal
# ---------------------------------------------------------------------------


def _plane_from(points: np.ndarray):
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c)
    n = vt[-1]
    if n[2] < 0:
        n = -n
    return n, -n @ c


def remove_ground(
    centers: np.ndarray,
    dist: float = 0.25,
    percentile: float = 30.0,
    max_tilt_deg: float = 30.0,
    iterations: int = 200,
    seed: int = 0,
):
    """Split ``centers`` into ``(ground_indices, object_indices)``.

    A plane is fitted by RANSAC to the centers below the ``percentile``-th
    height and refined on its inliers. If its normal tilts more than
    ``max_tilt_deg`` from +z, the horizontal plane at that height is used
    instead. Centers within ``dist`` of the plane are ground.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    n = len(centers)
    everything = np.arange(n)
    if n < 3:
        return np.zeros(0, dtype=np.int64), everything
    z_cut = np.percentile(centers[:, 2], percentile)
    low = centers[centers[:, 2] <= z_cut]
    rng = np.random.default_rng(seed)
    best_normal, best_d, best_count = None, None, -1
    if len(low) >= 3:
        for _ in range(iterations):
            tri = low[rng.choice(len(low), 3, replace=False)]
            normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            norm = np.linalg.norm(normal)
            if norm < 1e-9:
                continue
            normal = normal / norm
            if normal[2] < 0:
                normal = -normal
            d = -normal @ tri[0]
            count = int(np.sum(np.abs(low @ normal + d) <= dist))
            if count > best_count:
                best_normal, best_d, best_count = normal, d, count
    if best_normal is not None:
        inliers = low[np.abs(low @ best_normal + best_d) <= dist]
        if len(inliers) >= 3:
            best_normal, best_d = _plane_from(inliers)
    cos_tilt = np.cos(np.deg2rad(max_tilt_deg))
    if best_normal is None or best_normal[2] < cos_tilt:
        best_normal, best_d = np.array([0.0, 0.0, 1.0]), -z_cut
    is_ground = np.abs(centers @ best_normal + best_d) <= dist
    return everything[is_ground], everything[~is_ground]


# ---------------------------------------------------------------------------
# Clustering and association
# ---------------------------------------------------------------------------


def cluster(object_centers: np.ndarray, eps: float = 0.8, min_size: int = 10) -> np.ndarray:
    """Label each center with a cluster id, or ``NOISE``.

    Clusters are the connected components of the ``eps``-neighbourhood
    graph; components smaller than ``min_size`` are noise. Ids are assigned
    in order of each cluster's smallest member index.
    """
    pts = np.asarray(object_centers, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    sizes = np.bincount(comp)
    next_id = 0
    remap = {}
    for i, c in enumerate(comp):
        if sizes[c] < min_size:
            continue
        if c not in remap:
            remap[c] = next_id
            next_id += 1
        labels[i] = remap[c]
    return labels


def associate_clusters(prev_clusters: Sequence[np.ndarray], curr_clusters: Sequence[np.ndarray], gate: float = 3.0):
    """Greedy mutual-nearest matching of cluster centroids within ``gate`` meters.

    Returns ``(prev_id, curr_id)`` pairs sorted by ``prev_id``.
    """
    if not len(prev_clusters) or not len(curr_clusters):
        return []
    a = np.stack([np.mean(c, axis=0) for c in prev_clusters])
    b = np.stack([np.mean(c, axis=0) for c in curr_clusters])
    dist = np.linalg.norm(a[:, None] - b[None], axis=2)
    free_a = np.ones(len(a), dtype=bool)
    free_b = np.ones(len(b), dtype=bool)
    pairs = []
    while free_a.any() and free_b.any():
        d = np.where(free_a[:, None] & free_b[None], dist, np.inf)
        best_b = np.argmin(d, axis=1)
        best_a = np.argmin(d, axis=0)
        found = False
        for i in np.flatnonzero(free_a):
            j = best_b[i]
            if best_a[j] == i and d[i, j] <= gate:
                pairs.append((int(i), int(j)))
                free_a[i] = free_b[j] = False
                found = True
        if not found:
            break
    return sorted(pairs)


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------


def rigid_fit(src: np.ndarray, dst: np.ndarray):
    """Least-squares ``(R, t)`` with ``R @ src_i + t ~ dst_i`` (Kabsch)."""
    ca, cb = src.mean(axis=0), dst.mean(axis=0)
    H = (src - ca).T @ (dst - cb)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cb - R @ ca


# coarse-yaw costs (mean NN distance, meters) closer than this count as tied
_YAW_TIE_TOL = 1e-6


@dataclass
class IcpResult:
    R: np.ndarray
    t: np.ndarray
    rms: float
    history: list  # residual RMS after initialization and after each round

    def __iter__(self):
        return iter((self.R, self.t))


def icp_register(
    src_points: np.ndarray,
    dst_points: np.ndarray,
    max_iter: int = 30,
    tol: float = 1e-4,
    yaw_step_deg: float = 10.0,
) -> IcpResult:
    """Rigid transform taking ``src_points`` onto ``dst_points``.

    Starts from centroid alignment combined with the best yaw on a
    ``yaw_step_deg`` grid, then alternates nearest-neighbour matching with a
    closed-form fit until the transform changes by less than ``tol`` or
    ``max_iter`` rounds pass. The lowest-residual transform is returned.
    """
    src = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst_points, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("icp_register needs non-empty point sets")
    tree = cKDTree(dst)
    c_src, c_dst = src.mean(axis=0), dst.mean(axis=0)

    yaws = np.deg2rad(np.arange(0.0, 360.0, yaw_step_deg))
    costs = np.empty(len(yaws))
    for k, yaw in enumerate(yaws):
        R = yaw_matrix(yaw)
        d, _ = tree.query(src @ R.T + (c_dst - R @ c_src))
        costs[k] = d.mean()
    # symmetric shapes give several equally good yaws; prefer the smallest rotation
    tied = np.flatnonzero(costs <= costs.min() + _YAW_TIE_TOL)
    wrapped = np.abs(np.angle(np.exp(1j * yaws[tied])))
    R = yaw_matrix(yaws[tied[np.argmin(wrapped)]])
    t = c_dst - R @ c_src
    d, nn = tree.query(src @ R.T + t)
    rms = float(np.sqrt(np.mean(d**2)))
    history = [rms]
    best_R, best_t, best_rms = R, t, rms
    for _ in range(max_iter):
        if best_rms == 0.0:
            break
        R_new, t_new = rigid_fit(src, dst[nn])
        d, nn = tree.query(src @ R_new.T + t_new)
        rms = float(np.sqrt(np.mean(d**2)))
        history.append(rms)
        change = np.linalg.norm(R_new - R) + np.linalg.norm(t_new - t)
        R, t = R_new, t_new
        if rms < best_rms:
            best_R, best_t, best_rms = R, t, rms
        if change < tol:
            break
    return IcpResult(best_R, best_t, best_rms, history)


# ---------------------------------------------------------------------------
# Flow, propagation, static history
# ---------------------------------------------------------------------------


def _split_clusters(points: np.ndarray, cfg: PipelineConfig):
    ground, objects = remove_ground(points, dist=cfg.ground_dist, seed=cfg.seed)
    labels = np.full(len(points), GROUND, dtype=np.int64)
    labels[objects] = cluster(points[objects], eps=cfg.cluster_eps, min_size=cfg.cluster_min_size)
    n_clusters = int(labels.max()) + 1 if len(labels) and labels.max() >= 0 else 0
    members = [np.flatnonzero(labels == c) for c in range(n_clusters)]
    return labels, members


def scene_flow(prev_set: GaussianSet, curr_set: GaussianSet, cfg: PipelineConfig) -> FlowField:
    """Flow vectors for every Gaussian of ``prev_set`` towards ``curr_set``."""
    n = len(prev_set)
    flow = FlowField.zeros(n)
    if n == 0 or len(curr_set) == 0:
        return flow
    prev_labels, prev_members = _split_clusters(prev_set.mu, cfg)
    _, curr_members = _split_clusters(curr_set.mu, cfg)
    flow.cluster_of = prev_labels
    pairs = associate_clusters(
        [prev_set.mu[m] for m in prev_members], [curr_set.mu[m] for m in curr_members], gate=cfg.assoc_gate
    )
    for i, j in pairs:
        src = prev_set.mu[prev_members[i]]
        res = icp_register(src, curr_set.mu[curr_members[j]])
        flow.vectors[prev_members[i]] = src @ res.R.T + res.t - src
        flow.transforms[(i, j)] = (res.R, res.t)
    return flow


def propagate_dynamic(prev_set: GaussianSet, flow: FlowField, curr_set: GaussianSet, tau: float, t: Optional[int] = None) -> GaussianSet:
    """Append moved copies of the previous Gaussians whose flow is at least ``tau``."""
    moving = np.flatnonzero(flow.magnitude >= tau)
    if len(moving) == 0:
        return curr_set
    copies = prev_set.subset(moving)
    copies.mu = copies.mu + flow.vectors[moving]
    stamp = int(curr_set.t.max()) if t is None and len(curr_set) else t
    if stamp is not None:
        copies.t = np.full(len(copies), stamp, dtype=np.int64)
    copies = copies.with_classes(curr_set.num_classes) if copies.num_classes < curr_set.num_classes else copies
    return GaussianSet.concat([curr_set, copies])


class StaticQueue:
    """World-frame history of static Gaussians, at most one per cell."""

    def __init__(self, grid: GridSpec, num_classes: int, delta: Optional[float] = None):
        self.origin = grid.mins
        self.delta = float(delta if delta is not None else grid.delta)
        self.cells = np.zeros((0, 3), dtype=np.int64)
        self.gaussians = GaussianSet.empty(num_classes, grid.delta)

    def __len__(self) -> int:
        return len(self.gaussians)

    def cell_keys(self, mu: np.ndarray) -> np.ndarray:
        return np.floor((mu - self.origin) / self.delta + 1e-9).astype(np.int64)

    def insert(self, gaussians: GaussianSet) -> None:
        if len(gaussians) == 0:
            return
        merged = GaussianSet.concat([self.gaussians, gaussians])
        cells = np.concatenate([self.cells, self.cell_keys(gaussians.mu)])
        # keep the last (newest) entry for every cell, ordered by cell
        rev = cells[::-1]
        _, first_rev = np.unique(rev, axis=0, return_index=True)
        keep = len(cells) - 1 - first_rev
        self.cells = cells[keep]
        self.gaussians = merged.subset(keep)

    def evict(self, center: np.ndarray, max_range: float) -> int:
        """Drop entries horizontally farther than ``max_range`` from ``center``."""
        if len(self) == 0:
            return 0
        far = np.linalg.norm(self.gaussians.mu[:, :2] - np.asarray(center)[:2], axis=1) > max_range
        self.cells = self.cells[~far]
        self.gaussians = self.gaussians.subset(~far)
        return int(far.sum())

    def grow_classes(self, num_classes: int) -> None:
        self.gaussians = self.gaussians.with_classes(num_classes)


def enqueue_static(prev_set: GaussianSet, flow: FlowField, tau: float, queue: StaticQueue) -> StaticQueue:
    """Insert the previous Gaussians whose flow is below ``tau``; newest wins per cell."""
    static = np.flatnonzero(flow.magnitude < tau)
    queue.insert(prev_set.subset(static))
    return queue


def write_flow(path, flow: FlowField) -> None:
    """Debug dump, one ``gaussian_index fx fy fz cluster_id`` line per Gaussian."""
    lines = [
        f"{i} {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c}" for i, (v, c) in enumerate(zip(flow.vectors, flow.cluster_of))
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
