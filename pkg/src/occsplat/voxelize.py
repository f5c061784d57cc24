"""Scale-aware Gaussian-to-voxel conversion and grid file I/O.

Every kept Gaussian scatters its semantic distribution, weighted by its
spatial kernel, onto the voxel centers inside its truncated Mahalanobis
ellipsoid. Voxels with too little total weight stay empty; the rest take
the argmax class.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence, Union

import numba
import numpy as np

from .core import SENTINEL, GaussianSet, GridSpec, PipelineConfig, VoxelGrid
from .flow import StaticQueue


@numba.njit(cache=True)
def _bounds(mu_a, half_a, lo, delta, n):
    # voxel centers lo + (k + 0.5) * delta within [mu - half, mu + half]
    k0 = int(np.ceil((mu_a - half_a - lo) / delta - 0.5))
    k1 = int(np.floor((mu_a + half_a - lo) / delta - 0.5))
    return max(k0, 0), min(k1, n - 1)


@numba.njit(cache=True)
def _scatter_weight(mu, prec, half, mins, delta, dims, trunc2, inv_2s2, Z):
    nx, ny, nz = dims[0], dims[1], dims[2]
    for g in range(mu.shape[0]):
        x0, x1 = _bounds(mu[g, 0], half[g, 0], mins[0], delta, nx)
        y0, y1 = _bounds(mu[g, 1], half[g, 1], mins[1], delta, ny)
        z0, z1 = _bounds(mu[g, 2], half[g, 2], mins[2], delta, nz)
        P = prec[g]
        for i in range(x0, x1 + 1):
            dx = mins[0] + (i + 0.5) * delta - mu[g, 0]
            for j in range(y0, y1 + 1):
                dy = mins[1] + (j + 0.5) * delta - mu[g, 1]
                for k in range(z0, z1 + 1):
                    dz = mins[2] + (k + 0.5) * delta - mu[g, 2]
                    m2 = (
                        P[0, 0] * dx * dx + P[1, 1] * dy * dy + P[2, 2] * dz * dz
                        + 2.0 * (P[0, 1] * dx * dy + P[0, 2] * dx * dz + P[1, 2] * dy * dz)
                    )
                    if m2 <= trunc2:
                        Z[i, j, k] += np.exp(-m2 * inv_2s2)


@numba.njit(cache=True)
def _scatter_classes(mu, prec, half, sem, mins, delta, dims, trunc2, inv_2s2, slot, acc):
    nx, ny, nz = dims[0], dims[1], dims[2]
    C = sem.shape[1]
    for g in range(mu.shape[0]):
        x0, x1 = _bounds(mu[g, 0], half[g, 0], mins[0], delta, nx)
        y0, y1 = _bounds(mu[g, 1], half[g, 1], mins[1], delta, ny)
        z0, z1 = _bounds(mu[g, 2], half[g, 2], mins[2], delta, nz)
        P = prec[g]
        for i in range(x0, x1 + 1):
            dx = mins[0] + (i + 0.5) * delta - mu[g, 0]
            for j in range(y0, y1 + 1):
                dy = mins[1] + (j + 0.5) * delta - mu[g, 1]
                for k in range(z0, z1 + 1):
                    s = slot[i, j, k]
                    if s < 0:
                        continue
                    dz = mins[2] + (k + 0.5) * delta - mu[g, 2]
                    m2 = (
                        P[0, 0] * dx * dx + P[1, 1] * dy * dy + P[2, 2] * dz * dz
                        + 2.0 * (P[0, 1] * dx * dy + P[0, 2] * dx * dz + P[1, 2] * dy * dz)
                    )
                    if m2 <= trunc2:
                        w = np.exp(-m2 * inv_2s2)
                        for c in range(C):
                            acc[s, c] += sem[g, c] * w


def kept_gaussians(current: GaussianSet, queue, spec: GridSpec, cfg: PipelineConfig) -> GaussianSet:
    """The Gaussians that take part in voxelization.

    Queue entries need activated opacity of at least ``cfg.opacity_keep``;
    current-frame Gaussians too when ``cfg.opacity_filter == "all"``. Only
    centers inside the grid are kept.
    """
    history = queue.gaussians if isinstance(queue, StaticQueue) else queue
    parts = []
    for gs, filtered in ((current, cfg.opacity_filter == "all"), (history, True)):
        if gs is None or len(gs) == 0:
            continue
        _, keep = spec.cells(gs.mu)
        if filtered:
            keep &= gs.opacities() >= cfg.opacity_keep
        parts.append(gs.subset(keep))
    if not parts:
        return GaussianSet.empty(current.num_classes, current.delta)
    return GaussianSet.concat(parts)


def _label(acc: np.ndarray, Z_occ: np.ndarray):
    probs = acc / Z_occ[:, None]
    # argmax returns the first maximum, i.e. the smaller class id on ties
    return (np.argmax(probs, axis=1) + 1).astype(np.uint8), probs


def supersampling(spec: GridSpec, gaussian_delta: float) -> int:
    """Samples per axis for voxels coarser than the Gaussians' native cell size."""
    return max(1, int(np.ceil(spec.delta / gaussian_delta - 1e-9)))


def _scale_aware(gs: GaussianSet, sem: np.ndarray, spec: GridSpec, cfg: PipelineConfig, n: int):
    """Occupancy and summed class weights of every voxel, sampled on an ``n``-fold finer lattice."""
    mu = np.ascontiguousarray(gs.mu)
    prec = np.ascontiguousarray(gs.inverse_covariances())
    half = np.ascontiguousarray(cfg.trunc_mahal * np.sqrt(np.einsum("kii->ki", gs.covariances())))
    dims = tuple(n * d for d in spec.dims)
    dims_arr = np.array(dims, dtype=np.int64)
    step = spec.delta / n
    trunc2 = float(cfg.trunc_mahal**2)
    inv_2s2 = 1.0 / (2.0 * cfg.sigma_vox**2)
    Z = np.zeros(dims)
    _scatter_weight(mu, prec, half, spec.mins, step, dims_arr, trunc2, inv_2s2, Z)
    occ = Z >= cfg.occ_weight_eps
    slot = np.full(dims, -1, dtype=np.int64)
    n_occ = int(occ.sum())
    slot[occ] = np.arange(n_occ)
    acc = np.zeros((n_occ, sem.shape[1]))
    _scatter_classes(mu, prec, half, sem, spec.mins, step, dims_arr, trunc2, inv_2s2, slot, acc)
    if n == 1:
        return occ, acc, Z[occ]
    # pool the occupied samples of each voxel
    owner = np.argwhere(occ) // n
    flat = np.ravel_multi_index(owner.T, spec.dims)
    cells, inv = np.unique(flat, return_inverse=True)
    pooled = np.zeros((len(cells), sem.shape[1]))
    np.add.at(pooled, inv, acc)
    weight = np.bincount(inv, weights=Z[occ], minlength=len(cells))
    coarse = np.zeros(spec.dims, dtype=bool)
    coarse.reshape(-1)[cells] = True
    return coarse, pooled, weight


def voxelize(
    current: GaussianSet,
    queue: Union[StaticQueue, GaussianSet, None],
    spec: GridSpec,
    cfg: PipelineConfig,
    return_probs: bool = False,
    scale_aware: Optional[bool] = None,
) -> VoxelGrid:
    """Label every voxel of ``spec`` from the current Gaussians and the static queue.

    Voxels coarser than the Gaussians' cell size are sampled on a finer
    lattice (spacing at most that cell size): such a voxel is occupied when
    any of its samples is, and takes the argmax of its samples' summed class
    weights. With ``scale_aware`` off (the center-scatter fallback) each
    Gaussian puts unit weight on the voxel containing its center only.
    """
    scale_aware = cfg.scale_aware if scale_aware is None else scale_aware
    gs = kept_gaussians(current, queue, spec, cfg)
    C = max(spec.num_classes, gs.num_classes, 1)
    dims = spec.dims
    labels = np.zeros(dims, dtype=np.uint8)
    probs = np.zeros(dims + (C,)) if return_probs else None
    if len(gs) == 0:
        return VoxelGrid(spec.with_classes(C), labels, probs)
    sem = np.zeros((len(gs), C))
    sem[:, : gs.num_classes] = gs.sem

    if scale_aware:
        occ, acc, Z_occ = _scale_aware(gs, sem, spec, cfg, supersampling(spec, gs.delta))
    else:
        idx, _ = spec.cells(gs.mu)
        flat = np.ravel_multi_index(idx.T, dims)
        cells, inv = np.unique(flat, return_inverse=True)
        acc = np.zeros((len(cells), C))
        np.add.at(acc, inv, sem)
        Z_occ = np.bincount(inv).astype(np.float64)
        occ = np.zeros(dims, dtype=bool)
        occ.reshape(-1)[cells] = Z_occ >= cfg.occ_weight_eps
        keep = Z_occ >= cfg.occ_weight_eps
        acc, Z_occ = acc[keep], Z_occ[keep]
    lab, p = _label(acc, Z_occ)
    labels[occ] = lab
    if return_probs:
        probs[occ] = p
    return VoxelGrid(spec.with_classes(C), labels, probs)


def grid_diff(a: VoxelGrid, b: VoxelGrid) -> dict:
    """Number of voxels whose labels differ, keyed by the class they hold in ``a``."""
    if a.spec.to_dict() != b.spec.to_dict():
        raise ValueError("grid_diff needs grids over the same spec")
    changed = a.labels != b.labels
    ids, counts = np.unique(a.labels[changed], return_counts=True)
    out = {c: 0 for c in range(max(a.spec.num_classes, int(a.labels.max(initial=0))) + 1)}
    out.update({int(c): int(n) for c, n in zip(ids, counts)})
    return out


def subvoxel_containment(coarse: VoxelGrid, fine: VoxelGrid) -> np.ndarray:
    """Occupied coarse voxels (as ``(n, 3)`` indices) with no same-class fine subvoxel.

    ``fine`` must halve the coarse voxel size over the same ranges.
    """
    cx, cy, cz = coarse.labels.shape
    if fine.labels.shape != (2 * cx, 2 * cy, 2 * cz):
        raise ValueError("fine grid must have twice the coarse dims")
    blocks = fine.labels.reshape(cx, 2, cy, 2, cz, 2).transpose(0, 2, 4, 1, 3, 5).reshape(cx, cy, cz, 8)
    match = np.any(blocks == coarse.labels[..., None], axis=-1)
    bad = coarse.occupied & ~match
    return np.argwhere(bad)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _header(spec: GridSpec, class_names: Sequence[str], frame: int) -> dict:
    head = spec.to_dict()
    head.update({"class_names": list(class_names), "frame": int(frame)})
    return head


def write_grid(path, grid: VoxelGrid, class_names: Sequence[str], frame: int) -> Path:
    """Header JSON line then raw uint8 labels, x-major then y then z."""
    path = Path(path)
    head = json.dumps(_header(grid.spec, class_names, frame), sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(head.encode() + b"\n")
        fh.write(np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes(order="C"))
    return path


def write_mask(path, mask: np.ndarray, spec: GridSpec, frame: int = 0) -> Path:
    """Boolean voxel mask in the grid file layout (payload 0/1)."""
    grid = VoxelGrid(spec, np.asarray(mask, dtype=np.uint8))
    return write_grid(path, grid, [], frame)


def read_grid(path):
    """Returns ``(VoxelGrid, header dict)``."""
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    head = json.loads(raw[:nl].decode())
    dims = tuple(head["dims"])
    spec = GridSpec(
        tuple(head["x_range"]), tuple(head["y_range"]), tuple(head["z_range"]), head["delta"],
        num_classes=len(head.get("class_names", [])),
    )
    if spec.dims != dims:
        raise ValueError(f"{path}: header dims {dims} disagree with ranges / delta")
    payload = np.frombuffer(raw[nl + 1 :], dtype=np.uint8)
    if payload.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload has {payload.size} bytes, expected {int(np.prod(dims))}")
    return VoxelGrid(spec, payload.reshape(dims).copy()), head


def read_mask(path) -> np.ndarray:
    grid, _ = read_grid(path)
    return grid.labels.astype(bool)


def class_palette(num_classes: int) -> np.ndarray:
    """Deterministic RGB color per class id; row 0 is the empty class."""
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(num_classes + 1, 3)).astype(np.uint8)
    pal[0] = 0
    return pal


def write_ply(path, gaussians: GaussianSet) -> Path:
    """ASCII point export of Gaussian centers colored by argmax class."""
    path = Path(path)
    n = len(gaussians)
    cls = np.argmax(gaussians.sem, axis=1) + 1 if n else np.zeros(0, dtype=np.int64)
    pal = class_palette(max(gaussians.num_classes, 1))
    lines = [
        "ply", "format ascii 1.0", f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "property uchar label", "end_header",
    ]
    for p, c in zip(gaussians.mu, cls):
        r, g, b = pal[c]
        lines.append(f"{p[0]:.5f} {p[1]:.5f} {p[2]:.5f} {r} {g} {b} {c}")
    path.write_text("\n".join(lines) + "\n")
    return path
