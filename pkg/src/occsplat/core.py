"""Domain types, activations and grid conventions shared by every stage.

Conventions used throughout the package:

* Quaternions are stored as ``(w, x, y, z)``.
* Gaussians live in the world frame.
* Pixel ``(col, row)`` covers ``[col, col+1) x [row, row+1)`` in continuous
  image coordinates, so its center is at ``(col + 0.5, row + 0.5)``.
* Voxel binning is half-open: cell ``k`` along an axis covers
  ``[min + k*delta, min + (k+1)*delta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

# Class id reserved for "no label" in masks and for "empty" in grids.
SENTINEL = 0


def sigmoid(x):
    return expit(x)


def inverse_sigmoid(p):
    return logit(p)


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------


def normalize_quats(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.where(n > 0, n, 1.0)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions ``(..., 4)`` in ``(w, x, y, z)`` order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.allclose(R @ R.T, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol)


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------


@dataclass
class Gaussian:
    """A single time-stamped anisotropic blob.

    ``delta`` is the voxel size the scale activation is tied to: the
    activated scale is ``2 * delta * sigmoid(scale_raw)``.
    """

    mu: np.ndarray
    scale_raw: np.ndarray
    quat: np.ndarray
    opacity_raw: float
    color: np.ndarray
    sem: np.ndarray
    t: int
    delta: float

    @property
    def scale(self) -> np.ndarray:
        return 2.0 * self.delta * sigmoid(np.asarray(self.scale_raw, dtype=np.float64))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_raw))


def covariance(g: Gaussian) -> np.ndarray:
    """``R(q) diag(s^2) R(q)^T`` with the activated scale."""
    R = quat_to_rotmat(normalize_quats(g.quat))
    s = g.scale
    cov = (R * s**2) @ R.T
    return 0.5 * (cov + cov.T)


@dataclass
class GaussianSet:
    """Struct-of-arrays container for ``K`` Gaussians over ``C`` classes."""

    mu: np.ndarray  # (K, 3)
    scale_raw: np.ndarray  # (K, 3)
    quat: np.ndarray  # (K, 4)
    opacity_raw: np.ndarray  # (K,)
    color: np.ndarray  # (K, 3)
    sem: np.ndarray  # (K, C)
    t: np.ndarray  # (K,) int
    delta: float

    # fields that carry one row per Gaussian
    ARRAY_FIELDS = ("mu", "scale_raw", "quat", "opacity_raw", "color", "sem", "t")

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        k = len(self.mu)
        self.scale_raw = np.asarray(self.scale_raw, dtype=np.float64).reshape(k, 3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(k, 4)
        self.opacity_raw = np.asarray(self.opacity_raw, dtype=np.float64).reshape(k)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(k, 3)
        sem = np.asarray(self.sem, dtype=np.float64)
        self.sem = sem if sem.ndim == 2 and len(sem) == k else sem.reshape(k, -1)
        self.t = np.asarray(self.t, dtype=np.int64).reshape(k)
        self.delta = float(self.delta)

    @classmethod
    def empty(cls, num_classes: int, delta: float) -> "GaussianSet":
        return cls(
            mu=np.zeros((0, 3)),
            scale_raw=np.zeros((0, 3)),
            quat=np.zeros((0, 4)),
            opacity_raw=np.zeros(0),
            color=np.zeros((0, 3)),
            sem=np.zeros((0, num_classes)),
            t=np.zeros(0, dtype=np.int64),
            delta=delta,
        )

    @classmethod
    def from_gaussians(cls, items: Sequence[Gaussian], num_classes: int, delta: float) -> "GaussianSet":
        if not items:
            return cls.empty(num_classes, delta)
        return cls(
            mu=np.stack([g.mu for g in items]),
            scale_raw=np.stack([g.scale_raw for g in items]),
            quat=np.stack([g.quat for g in items]),
            opacity_raw=np.array([g.opacity_raw for g in items]),
            color=np.stack([g.color for g in items]),
            sem=np.stack([g.sem for g in items]),
            t=np.array([g.t for g in items]),
            delta=delta,
        )

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def num_classes(self) -> int:
        return self.sem.shape[1]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mu=self.mu[i].copy(),
            scale_raw=self.scale_raw[i].copy(),
            quat=self.quat[i].copy(),
            opacity_raw=float(self.opacity_raw[i]),
            color=self.color[i].copy(),
            sem=self.sem[i].copy(),
            t=int(self.t[i]),
            delta=self.delta,
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def scales(self) -> np.ndarray:
        return 2.0 * self.delta * sigmoid(self.scale_raw)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(normalize_quats(self.quat))

    def covariances(self) -> np.ndarray:
        R = self.rotations()
        s2 = self.scales() ** 2
        cov = np.einsum("kij,kj,klj->kil", R, s2, R)
        return 0.5 * (cov + np.swapaxes(cov, 1, 2))

    def inverse_covariances(self) -> np.ndarray:
        R = self.rotations()
        inv_s2 = 1.0 / self.scales() ** 2
        prec = np.einsum("kij,kj,klj->kil", R, inv_s2, R)
        return 0.5 * (prec + np.swapaxes(prec, 1, 2))

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name).copy() for name in self.ARRAY_FIELDS}, delta=self.delta)

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name)[index] for name in self.ARRAY_FIELDS}, delta=self.delta)

    def with_classes(self, num_classes: int) -> "GaussianSet":
        """Zero-pad the semantic vectors when the vocabulary grows."""
        c = self.num_classes
        if num_classes < c:
            raise ValueError(f"cannot shrink semantic vectors from {c} to {num_classes} classes")
        if num_classes == c:
            return self
        sem = np.zeros((len(self), num_classes))
        sem[:, :c] = self.sem
        return replace(self, sem=sem)

    @staticmethod
    def concat(sets: Iterable["GaussianSet"]) -> "GaussianSet":
        sets = list(sets)
        if not sets:
            raise ValueError("concat needs at least one set")
        delta = sets[0].delta
        c = max(s.num_classes for s in sets)
        sets = [s.with_classes(c) for s in sets]
        return GaussianSet(
            **{name: np.concatenate([getattr(s, name) for s in sets]) for name in GaussianSet.ARRAY_FIELDS},
            delta=delta,
        )


# ---------------------------------------------------------------------------
# Sensors
# ---------------------------------------------------------------------------


@dataclass
class CameraView:
    """One pinhole camera with its image, class-id mask and depth targets.

    ``depth_uv`` holds the continuous pixel coordinates of the depth targets;
    the integer pixel a target supervises is ``floor(depth_uv)``.
    """

    intrinsics: np.ndarray  # (3, 3)
    extrinsics: np.ndarray  # (3, 4) world -> camera
    width: int
    height: int
    image: np.ndarray  # (H, W, 3) in [0, 1]
    sem_mask: np.ndarray  # (H, W) int, SENTINEL = unlabeled
    sky_mask: Optional[np.ndarray] = None  # (H, W) bool
    depth_uv: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    depth: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        self.width = int(self.width)
        self.height = int(self.height)
        self.image = np.asarray(self.image, dtype=np.float64)
        self.sem_mask = np.asarray(self.sem_mask, dtype=np.int64)
        if self.sky_mask is not None:
            self.sky_mask = np.asarray(self.sky_mask, dtype=bool)
        self.depth_uv = np.asarray(self.depth_uv, dtype=np.float64).reshape(-1, 2)
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(-1)

    def validate(self, num_classes: Optional[int] = None) -> None:
        K = self.intrinsics
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must be 3x3 with positive focal lengths")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("intrinsics must have a zero bottom-left block")
        if self.extrinsics.shape != (3, 4) or not is_rotation(self.extrinsics[:, :3], tol=1e-5):
            raise ValueError("extrinsics must be a 3x4 rigid world-to-camera transform")
        shape = (self.height, self.width)
        if self.image.shape != shape + (3,):
            raise ValueError(f"image shape {self.image.shape} does not match {shape + (3,)}")
        if self.sem_mask.shape != shape:
            raise ValueError(f"mask shape {self.sem_mask.shape} does not match {shape}")
        if self.sky_mask is not None and self.sky_mask.shape != shape:
            raise ValueError(f"sky mask shape {self.sky_mask.shape} does not match {shape}")
        if num_classes is not None and self.sem_mask.size:
            if self.sem_mask.min() < 0 or self.sem_mask.max() > num_classes:
                raise ValueError("mask ids outside {sentinel, 1..C}")
        if np.any(self.depth <= 0):
            raise ValueError("depth targets must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:, 3]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """Continuous pixel coordinates and camera-frame depth of world points.

        Points with non-positive depth get NaN pixel coordinates.
        """
        cam = self.to_camera(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uvw = cam @ self.intrinsics.T
            uv = uvw[:, :2] / z[:, None]
        uv[z <= 0] = np.nan
        return uv, z

    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass
class FrameBundle:
    """One time step of sensor input. ``points`` are already in the world frame."""

    t: int
    points: np.ndarray
    ego_pose: np.ndarray
    views: list

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.ego_pose = np.asarray(self.ego_pose, dtype=np.float64)

    def validate(self, num_classes: Optional[int] = None) -> None:
        if self.ego_pose.shape != (4, 4) or not is_rotation(self.ego_pose[:3, :3], tol=1e-5):
            raise ValueError("ego_pose rotation block must be orthonormal with determinant +1")
        if not np.allclose(self.ego_pose[3], [0, 0, 0, 1]):
            raise ValueError("ego_pose bottom row must be (0, 0, 0, 1)")
        if len(self.views) < 1:
            raise ValueError("a frame needs at least one camera view")
        for v in self.views:
            v.validate(num_classes)

    @property
    def ego_position(self) -> np.ndarray:
        return self.ego_pose[:3, 3]


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

_BIN_EPS = 1e-9


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple
    y_range: tuple
    z_range: tuple
    delta: float
    num_classes: int = 0

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            object.__setattr__(self, name, (lo, hi))
            if not hi > lo:
                raise ValueError(f"{name} must have positive length, got {(lo, hi)}")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        object.__setattr__(self, "delta", float(self.delta))
        if min(self.dims) < 1:
            raise ValueError("grid must have at least one cell per axis")

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    @property
    def dims(self) -> tuple:
        extent = self.maxs - self.mins
        return tuple(int(round(e / self.delta)) for e in extent)

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def with_delta(self, delta: float) -> "GridSpec":
        return replace(self, delta=float(delta))

    def with_classes(self, num_classes: int) -> "GridSpec":
        return replace(self, num_classes=int(num_classes))

    def cells(self, points: np.ndarray):
        """Integer cells of ``(n, 3)`` points and a mask of which are inside the grid."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx = np.floor((points - self.mins) / self.delta + _BIN_EPS).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.dims)), axis=1)
        return idx, inside

    def centers(self, idx: np.ndarray) -> np.ndarray:
        return self.mins + (np.asarray(idx, dtype=np.float64) + 0.5) * self.delta

    def center_grid(self) -> np.ndarray:
        """All voxel centers as an ``(X, Y, Z, 3)`` array."""
        axes = [self.mins[a] + (np.arange(n) + 0.5) * self.delta for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
            "delta": self.delta,
            "dims": list(self.dims),
        }


def world_to_grid(spec: GridSpec, x) -> Optional[tuple]:
    idx, inside = spec.cells(np.asarray(x, dtype=np.float64).reshape(1, 3))
    if not inside[0]:
        return None
    return tuple(int(i) for i in idx[0])


@dataclass
class VoxelGrid:
    spec: GridSpec
    labels: np.ndarray
    probs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.shape != self.spec.dims:
            raise ValueError(f"labels shape {self.labels.shape} does not match grid dims {self.spec.dims}")

    @classmethod
    def empty(cls, spec: GridSpec) -> "VoxelGrid":
        return cls(spec, np.zeros(spec.dims, dtype=np.uint8))

    @property
    def occupied(self) -> np.ndarray:
        return self.labels != SENTINEL


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    """All tunables of the lift / move / optimize / voxelize pipeline."""

    grid: GridSpec
    lambda_depth: float = 1.0
    tau_static: float = 0.5
    knn: int = 10
    sigma_mu: float = 1.0
    sigma_c: float = 0.2
    sigma_s: float = 1.0
    iters: int = 50
    smooth_every: int = 10
    opacity_keep: float = 0.3
    # which Gaussians the opacity_keep filter applies to: "queue" (static history only) or "all"
    opacity_filter: str = "queue"
    trunc_mahal: float = 3.0
    occ_weight_eps: float = 1e-3
    # spatial bandwidth of the voxelization kernel, kept apart from sigma_mu
    sigma_vox: float = 0.2
    init_opacity: float = 0.1
    # Adam step sizes; lr_mu is multiplied by grid.delta
    lr_mu: float = 1.6e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_quat: float = 1e-3
    # flow stage
    ground_dist: float = 0.25
    cluster_eps: float = 0.8
    cluster_min_size: int = 10
    assoc_gate: float = 3.0
    # static queue entries farther than this from the ego are evicted; None = grid half-diagonal
    max_range: Optional[float] = None
    # stage switches (ablations)
    use_flow: bool = True
    use_smooth: bool = True
    scale_aware: bool = True
    seed: int = 0

    POSITIVE = (
        "lambda_depth", "tau_static", "sigma_mu", "sigma_c", "sigma_s", "smooth_every",
        "opacity_keep", "trunc_mahal", "occ_weight_eps", "sigma_vox", "init_opacity",
        "cluster_eps", "assoc_gate", "ground_dist",
    )

    def validate(self) -> "PipelineConfig":
        for name in self.POSITIVE:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)!r}")
        if self.knn < 0 or self.iters < 0:
            raise ValueError("knn and iters must be non-negative")
        if not 0 < self.init_opacity < 1 or not 0 < self.opacity_keep < 1:
            raise ValueError("opacities must lie in (0, 1)")
        if self.opacity_filter not in ("queue", "all"):
            raise ValueError("opacity_filter must be 'queue' or 'all'")
        return self

    @property
    def queue_range(self) -> float:
        if self.max_range is not None:
            return float(self.max_range)
        return float(0.5 * np.linalg.norm(self.grid.maxs[:2] - self.grid.mins[:2]))

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        grid = data.pop("grid")
        if not isinstance(grid, GridSpec):
            grid = GridSpec(**{k: v for k, v in grid.items() if k != "dims"})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(grid=grid, **data).validate()
