"""Analytic test scenes: a ground plane plus boxes, ray-cast into LiDAR and cameras.

Everything here is exact and seeded, so it doubles as the ground-truth
oracle for occupancy, semantics and flow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import SENTINEL, CameraView, FrameBundle, GridSpec, VoxelGrid, yaw_matrix
from .eval import OrientedBox
from .ingest import ClassVocabulary, project_points_to_view, write_frame
from .voxelize import write_grid, write_mask

SKY_COLOR = (0.6, 0.75, 0.95)
GROUND_INSTANCE = 0
NO_HIT = -1


@dataclass(frozen=True)
class BoxSpec:
    name: str
    size: tuple
    center: tuple  # at frame 0
    velocity: tuple = (0.0, 0.0, 0.0)  # meters per frame
    yaw: float = 0.0
    color: tuple = (0.8, 0.2, 0.2)

    def center_at(self, t: int) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + t * np.asarray(self.velocity, dtype=np.float64)

    def box_at(self, t: int) -> OrientedBox:
        return OrientedBox(tuple(self.center_at(t)), tuple(self.size), self.yaw)

    @property
    def moving(self) -> bool:
        return bool(np.any(np.asarray(self.velocity) != 0))


@dataclass(frozen=True)
class CameraRig:
    yaws_deg: tuple = (0.0, 90.0, 180.0, 270.0)
    pitch_deg: float = -15.0
    width: int = 120
    height: int = 90
    focal: float = 60.0


def default_elevations(height: float = 1.8, near: float = 1.2, far: float = 11.5, ground_step: float = 0.1):
    """Channels that sweep the ground at even range steps, then 0.3 deg steps up to +5 deg."""
    ranges = np.arange(near, far, ground_step)
    low = -np.degrees(np.arctan2(height, ranges))
    high = np.arange(low[-1] + 0.3, 5.0 + 1e-9, 0.3)
    return tuple(np.concatenate([low, high]).tolist())


@dataclass(frozen=True)
class LidarSpec:
    elevations_deg: tuple = field(default_factory=default_elevations)
    azimuth_step_deg: float = 0.5
    max_range: float = 30.0


@dataclass
class SceneSpec:
    grid: GridSpec
    boxes: tuple
    frames: int = 6
    seed: int = 0
    ground_name: str = "ground"
    ground_z: float = 0.0
    ground_color: tuple = (0.5, 0.5, 0.5)
    sensor_height: float = 1.8
    ego_start: tuple = (0.0, 0.0)
    ego_velocity: tuple = (0.0, 0.0)
    cameras: CameraRig = field(default_factory=CameraRig)
    lidar: LidarSpec = field(default_factory=LidarSpec)
    label_noise: float = 0.0
    # classes that only enter the vocabulary at a later frame; before it their pixels are unlabeled
    first_frame: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = tuple(self.boxes)
        for t in range(self.frames):
            for b in self.boxes:
                c = b.center_at(t)
                h = 0.5 * np.abs(yaw_matrix(b.yaw)) @ np.asarray(b.size)
                if np.any(c - h < self.grid.mins - 1e-9) or np.any(c + h > self.grid.maxs + 1e-9):
                    raise ValueError(f"box {b.name!r} leaves the grid at frame {t}")

    @property
    def classes(self) -> tuple:
        names = [self.ground_name] + [b.name for b in self.boxes]
        names = list(dict.fromkeys(names))
        # late classes go last so that earlier ids never shift
        return tuple(sorted(names, key=lambda n: (self.first_frame.get(n, 0), names.index(n))))

    @property
    def full_vocabulary(self) -> ClassVocabulary:
        return ClassVocabulary(self.classes)

    def vocabulary(self, t: int) -> ClassVocabulary:
        return ClassVocabulary(tuple(n for n in self.classes if self.first_frame.get(n, 0) <= t))

    def class_id(self, name: str) -> int:
        return self.classes.index(name) + 1

    def ego_position(self, t: int) -> np.ndarray:
        xy = np.asarray(self.ego_start, dtype=np.float64) + t * np.asarray(self.ego_velocity, dtype=np.float64)
        return np.array([xy[0], xy[1], self.ground_z + self.sensor_height])

    def ego_pose(self, t: int) -> np.ndarray:
        pose = np.eye(4)
        pose[:3, 3] = self.ego_position(t)
        return pose

    def color_of(self, instance: np.ndarray) -> np.ndarray:
        table = np.array([self.ground_color] + [b.color for b in self.boxes] + [SKY_COLOR], dtype=np.float64)
        return table[np.where(instance == NO_HIT, len(table) - 1, instance)]

    def class_of(self, instance: np.ndarray) -> np.ndarray:
        """Full-vocabulary class id per instance (0 = ground); NO_HIT maps to the sentinel."""
        table = np.array([SENTINEL, self.class_id(self.ground_name)] + [self.class_id(b.name) for b in self.boxes])
        return table[np.asarray(instance) + 1]


@dataclass
class SynthFrame:
    frame: FrameBundle
    gt: VoxelGrid
    gt_flow: np.ndarray  # (n_points, 3)
    point_class: np.ndarray  # full-vocabulary ids
    point_instance: np.ndarray  # 0 = ground, i = boxes[i - 1]
    visible: np.ndarray  # camera-visible voxel mask over gt.spec
    vocabulary: ClassVocabulary  # the frame's own vocabulary, in which the masks are expressed


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def cast_rays(scene: SceneSpec, t: int, origins: np.ndarray, dirs: np.ndarray):
    """First hit of every ray. Returns ``(distance, instance)``; misses get inf and ``NO_HIT``.

    The ground plane is bounded by the grid's x/y ranges.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    n = len(dirs)
    best = np.full(n, np.inf)
    inst = np.full(n, NO_HIT, dtype=np.int64)
    eps = 1e-9

    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (scene.ground_z - origins[:, 2]) / dirs[:, 2]
    hit = np.isfinite(tg) & (tg > eps)
    p = origins + np.where(hit, tg, 0.0)[:, None] * dirs
    g = scene.grid
    hit &= (p[:, 0] >= g.x_range[0]) & (p[:, 0] <= g.x_range[1]) & (p[:, 1] >= g.y_range[0]) & (p[:, 1] <= g.y_range[1])
    best[hit] = tg[hit]
    inst[hit] = GROUND_INSTANCE

    for b_i, box in enumerate(scene.boxes, start=1):
        R = yaw_matrix(box.yaw)
        o = (origins - box.center_at(t)) @ R
        d = dirs @ R
        half = 0.5 * np.asarray(box.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
        # rays parallel to a slab: inside it -> unconstrained, outside -> miss
        par = d == 0
        outside = par & (np.abs(o) > half)
        lo = np.where(par, -np.inf, lo)
        hi = np.where(par, np.inf, hi)
        tmin, tmax = lo.max(axis=1), hi.min(axis=1)
        ok = ~outside.any(axis=1) & (tmax >= tmin) & (tmin > eps) & (tmin < best)
        best[ok] = tmin[ok]
        inst[ok] = b_i
    return best, inst


def lidar_rays(scene: SceneSpec):
    elev = np.radians(np.asarray(scene.lidar.elevations_deg))
    az = np.radians(np.arange(0.0, 360.0, scene.lidar.azimuth_step_deg))
    E, A = np.meshgrid(elev, az, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
    return dirs.reshape(-1, 3)


def camera_extrinsics(position: np.ndarray, yaw: float, pitch: float) -> np.ndarray:
    """World-to-camera ``[R | t]`` for a camera looking along (yaw, pitch), x right and y down."""
    f = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
    r = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return np.concatenate([R, (-R @ position)[:, None]], axis=1)


def pixel_rays(view: CameraView) -> np.ndarray:
    """Unit world directions through every pixel center, row-major."""
    cols, rows = np.meshgrid(np.arange(view.width) + 0.5, np.arange(view.height) + 0.5)
    pix = np.stack([cols.ravel(), rows.ravel(), np.ones(cols.size)], axis=1)
    cam = pix @ np.linalg.inv(view.intrinsics).T
    world = cam @ view.rotation  # R^T applied row-wise
    return world / np.linalg.norm(world, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Ground truth grids
# ---------------------------------------------------------------------------


def _box_overlap(spec: GridSpec, box: OrientedBox) -> np.ndarray:
    """Voxels sharing positive volume with ``box``; sub-sampled for yawed boxes."""
    if box.yaw == 0.0:
        lo = np.asarray(box.center) - 0.5 * np.asarray(box.size)
        hi = np.asarray(box.center) + 0.5 * np.asarray(box.size)
        axes = []
        for a, n in enumerate(spec.dims):
            edges = spec.mins[a] + np.arange(n + 1) * spec.delta
            axes.append((edges[:-1] < hi[a]) & (edges[1:] > lo[a]))
        return axes[0][:, None, None] & axes[1][None, :, None] & axes[2][None, None, :]
    sub = (np.arange(4) + 0.5) / 4 - 0.5
    offsets = np.stack(np.meshgrid(sub, sub, sub, indexing="ij"), axis=-1).reshape(-1, 3) * spec.delta
    centers = spec.center_grid().reshape(-1, 3)
    hit = np.zeros(len(centers), dtype=bool)
    for off in offsets:
        hit |= box.contains(centers + off)
    return hit.reshape(spec.dims)


def gt_grid(scene: SceneSpec, t: int, spec: Optional[GridSpec] = None) -> VoxelGrid:
    """Exact rasterization: the layer holding the ground plane plus every voxel overlapping a box."""
    spec = (spec or scene.grid).with_classes(len(scene.classes))
    labels = np.zeros(spec.dims, dtype=np.uint8)
    k = int(np.floor((scene.ground_z - spec.z_range[0]) / spec.delta + 1e-9))
    if 0 <= k < spec.dims[2]:
        labels[:, :, k] = scene.class_id(scene.ground_name)
    for box in scene.boxes:
        labels[_box_overlap(spec, box.box_at(t))] = scene.class_id(box.name)
    return VoxelGrid(spec, labels)


def visible_mask(scene: SceneSpec, t: int, views: Sequence[CameraView], spec: Optional[GridSpec] = None) -> np.ndarray:
    """Voxels crossed by camera pixel rays up to and including the first surface hit."""
    spec = spec or scene.grid
    mask = np.zeros(spec.dims, dtype=bool)
    step = spec.delta / 3.0
    far = float(np.linalg.norm(spec.maxs - spec.mins))
    for view in views:
        origin = view.center()
        dirs = pixel_rays(view)
        dist, _ = cast_rays(scene, t, origin, dirs)
        stop = np.minimum(np.where(np.isfinite(dist), dist + 0.25 * spec.delta, far), far)
        for s in range(0, len(dirs), 2048):
            d, L = dirs[s : s + 2048], stop[s : s + 2048]
            ts = np.arange(0.0, L.max() + step, step)
            pts = origin + ts[None, :, None] * d[:, None, :]
            valid = ts[None, :] <= L[:, None]
            idx, inside = spec.cells(pts[valid])
            idx = idx[inside]
            mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return mask


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------


def _render_view(scene: SceneSpec, t: int, K: np.ndarray, E: np.ndarray, rng) -> CameraView:
    cams = scene.cameras
    view = CameraView(K, E, cams.width, cams.height, np.zeros((cams.height, cams.width, 3)), np.zeros((cams.height, cams.width)))
    dist, inst = cast_rays(scene, t, view.center(), pixel_rays(view))
    vocab = scene.vocabulary(t)
    full = scene.class_of(inst)
    lut = np.array([SENTINEL] + [vocab.id_of(n) for n in scene.classes])
    mask = lut[full]
    if scene.label_noise > 0 and len(vocab) > 1:
        labeled = np.flatnonzero(mask != SENTINEL)
        flip = labeled[rng.random(len(labeled)) < scene.label_noise]
        # uniform over the other classes of the vocabulary
        shift = rng.integers(1, len(vocab), size=len(flip))
        mask[flip] = (mask[flip] - 1 + shift) % len(vocab) + 1
    shape = (cams.height, cams.width)
    view.image = scene.color_of(inst).reshape(shape + (3,))
    view.sem_mask = mask.reshape(shape)
    view.sky_mask = (inst == NO_HIT).reshape(shape)
    return view


def camera_views(scene: SceneSpec, t: int, rng=None) -> list:
    cams = scene.cameras
    K = np.array([[cams.focal, 0.0, cams.width / 2], [0.0, cams.focal, cams.height / 2], [0.0, 0.0, 1.0]])
    rng = rng if rng is not None else np.random.default_rng([scene.seed, t])
    pos = scene.ego_position(t)
    return [
        _render_view(scene, t, K, camera_extrinsics(pos, np.radians(yaw), np.radians(cams.pitch_deg)), rng)
        for yaw in cams.yaws_deg
    ]


def generate_frame(scene: SceneSpec, t: int) -> SynthFrame:
    if not 0 <= t < scene.frames:
        raise ValueError(f"frame {t} outside 0..{scene.frames - 1}")
    origin = scene.ego_position(t)
    dirs = lidar_rays(scene)
    dist, inst = cast_rays(scene, t, origin, dirs)
    hit = np.isfinite(dist) & (dist <= scene.lidar.max_range)
    points = origin + dist[hit, None] * dirs[hit]
    inst = inst[hit]

    vel = np.array([(0.0, 0.0, 0.0)] + [b.velocity for b in scene.boxes], dtype=np.float64)
    flow = vel[inst]
    views = camera_views(scene, t)
    for view in views:
        view.depth_uv, view.depth = project_points_to_view(points, view)
    vocab = scene.vocabulary(t)
    frame = FrameBundle(t=t, points=points, ego_pose=scene.ego_pose(t), views=views)
    return SynthFrame(
        frame=frame,
        gt=gt_grid(scene, t),
        gt_flow=flow,
        point_class=scene.class_of(inst),
        point_instance=inst,
        visible=visible_mask(scene, t, views),
        vocabulary=vocab,
    )


def surface_residual(scene: SceneSpec, t: int, points: np.ndarray, instance: np.ndarray) -> np.ndarray:
    """Distance from each point to the analytic surface of its instance."""
    res = np.zeros(len(points))
    g = instance == GROUND_INSTANCE
    res[g] = np.abs(points[g, 2] - scene.ground_z)
    for b_i, box in enumerate(scene.boxes, start=1):
        sel = instance == b_i
        if not sel.any():
            continue
        local = box.box_at(t).local(points[sel])
        excess = np.abs(local) - 0.5 * np.asarray(box.size)
        # on the surface: inside or on every slab and exactly on at least one face
        res[sel] = np.maximum(np.abs(excess.max(axis=1)), np.maximum(excess, 0).max(axis=1))
    return res


def write_sequence(scene: SceneSpec, out_dir, gt_dir=None) -> Path:
    """Frames in the ingest layout plus ``occ_<t>.bin`` / ``mask_<t>.bin`` ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt_root = Path(gt_dir) if gt_dir is not None else out / "gt"
    gt_root.mkdir(parents=True, exist_ok=True)
    for t in range(scene.frames):
        sf = generate_frame(scene, t)
        write_frame(out / f"frame_{t:04d}", sf.frame, sf.vocabulary)
        write_grid(gt_root / f"occ_{t:04d}.bin", sf.gt, scene.classes, t)
        write_mask(gt_root / f"mask_{t:04d}.bin", sf.visible, sf.gt.spec, t)
    meta = {
        "classes": list(scene.classes),
        "boxes": [
            {"name": b.name, "size": list(b.size), "center": list(b.center), "velocity": list(b.velocity), "yaw": b.yaw}
            for b in scene.boxes
        ],
        "frames": scene.frames,
    }
    (gt_root / "scene.json").write_text(json.dumps(meta, indent=2))
    return out


# ---------------------------------------------------------------------------
# Stock scenes
# ---------------------------------------------------------------------------

DESK_GRID = GridSpec((-8.0, 8.0), (-8.0, 8.0), (-0.5, 2.7), 0.2)

# faces sit a quarter voxel inside cells so that no surface lies on a voxel boundary
STATIC_BOX = BoxSpec("building", (2.0, 1.2, 2.0), (3.05, -3.35, 0.85), color=(0.8, 0.2, 0.2))
# the car drives toward the ego, so its motion uncovers almost no unseen ground
MOVING_BOX = BoxSpec("car", (2.0, 1.2, 1.2), (6.95, 0.05, 0.95), velocity=(-1.0, 0.0, 0.0), color=(0.2, 0.3, 0.9))
BUSH = BoxSpec("vegetation", (1.2, 1.2, 1.0), (-1.95, -3.35, 0.35), color=(0.2, 0.7, 0.2))
SPARSE_LIDAR = LidarSpec(elevations_deg=tuple(np.linspace(-30.0, 10.0, 32).tolist()), azimuth_step_deg=0.4)


def moving_box_scene(frames: int = 6, seed: int = 0, label_noise: float = 0.0, moving: bool = True, **kw) -> SceneSpec:
    """Ground, a static box and a box driving -x at 1 m/frame toward the ego."""
    car = MOVING_BOX if moving else BoxSpec("car", MOVING_BOX.size, MOVING_BOX.center, color=MOVING_BOX.color)
    return SceneSpec(grid=DESK_GRID, boxes=(STATIC_BOX, car), frames=frames, seed=seed, label_noise=label_noise, **kw)


def vocabulary_scene(frames: int = 6, new_class_frame: int = 3, seed: int = 0, **kw) -> SceneSpec:
    """The moving-box scene plus a bush whose class joins the vocabulary at ``new_class_frame``."""
    return SceneSpec(
        grid=DESK_GRID,
        boxes=(STATIC_BOX, MOVING_BOX, BUSH),
        frames=frames,
        seed=seed,
        first_frame={"vegetation": new_class_frame},
        **kw,
    )
