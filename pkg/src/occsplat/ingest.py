"""Frame directories on disk, the open class vocabulary, LiDAR depth targets.

A frame directory looks like::

    points.bin            float32 (x, y, z) triplets, sensor frame, little-endian
    ego_pose.json         4x4 row-major sensor-to-world transform
    vocab.json            class names; mask id i refers to vocab[i-1]
    view_<m>/image.png    8-bit RGB
    view_<m>/mask.png     16-bit class ids, 0 = unlabeled
    view_<m>/sky.png      optional, nonzero = sky
    view_<m>/calib.json   {"K": 3x3, "E": 3x4 world-to-camera}, row-major
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .core import SENTINEL, CameraView, FrameBundle, is_rotation

DEFAULT_MAX_SIZE = (400, 225)


class IngestError(Exception):
    """Base class for frame loading problems."""


class FrameLoadError(IngestError):
    pass


class FrameFormatError(IngestError):
    pass


class FrameValidationError(IngestError):
    pass


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple
    version: int = 0

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if any(not n for n in names):
            raise ValueError("class names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError(f"class names must be unique: {names}")
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        """1-based id of ``name``, or the sentinel when unknown."""
        try:
            return self.names.index(name) + 1
        except ValueError:
            return SENTINEL

    def name_of(self, class_id: int) -> Optional[str]:
        if 1 <= class_id <= len(self.names):
            return self.names[class_id - 1]
        return None

    def extend(self, names: Iterable[str]) -> "ClassVocabulary":
        """Append unseen names, keeping existing ids stable."""
        new = [n for n in dict.fromkeys(names) if n not in self.names]
        if not new:
            return self
        return ClassVocabulary(self.names + tuple(new), self.version + 1)


def remap_vocabulary(old_masks, old_vocab: ClassVocabulary, new_vocab: ClassVocabulary):
    """Translate mask ids from ``old_vocab`` to ``new_vocab`` by class name.

    Accepts one mask array or a sequence of them. Classes missing from the
    new vocabulary become the sentinel.
    """
    lut = np.zeros(len(old_vocab) + 1, dtype=np.int64)
    for i, name in enumerate(old_vocab.names, start=1):
        lut[i] = new_vocab.id_of(name)

    def _one(mask):
        mask = np.asarray(mask, dtype=np.int64)
        if mask.size and (mask.min() < 0 or mask.max() > len(old_vocab)):
            raise ValueError("mask contains ids outside the old vocabulary")
        return lut[mask]

    if isinstance(old_masks, np.ndarray):
        return _one(old_masks)
    return [_one(m) for m in old_masks]


def project_points_to_view(points_world: np.ndarray, view: CameraView):
    """Sparse depth targets ``(uv, depth)`` for the points that land inside ``view``.

    ``uv`` are continuous pixel coordinates and ``depth`` the camera-frame z.
    When several points fall in the same pixel the nearest one is kept.
    """
    uv, z = view.project(points_world)
    with np.errstate(invalid="ignore"):
        ok = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < view.width) & (uv[:, 1] >= 0) & (uv[:, 1] < view.height)
    uv, z = uv[ok], z[ok]
    if len(z) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    pix = np.floor(uv).astype(np.int64)
    flat = pix[:, 1] * view.width + pix[:, 0]
    order = np.lexsort((z, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    keep = order[first]
    keep.sort()
    return uv[keep], z[keep]


def _read_json(path: Path):
    if not path.is_file():
        raise FrameLoadError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FrameFormatError(f"{path}: invalid JSON ({exc})") from exc


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FrameLoadError(f"missing file: {path}")
    with Image.open(path) as img:
        img.load()
        return np.array(img)


def _frame_index(path: Path) -> int:
    m = re.search(r"(\d+)$", path.name)
    return int(m.group(1)) if m else 0


def _downsample(view: CameraView, max_size) -> CameraView:
    max_w, max_h = max_size
    f = max(math.ceil(view.width / max_w), math.ceil(view.height / max_h), 1)
    if f == 1:
        return view
    w, h = view.width // f, view.height // f
    img = view.image[: h * f, : w * f].reshape(h, f, w, f, 3).mean(axis=(1, 3))
    # nearest sample at the block's center pixel
    r = f // 2
    mask = view.sem_mask[r : h * f : f, r : w * f : f]
    sky = None if view.sky_mask is None else view.sky_mask[r : h * f : f, r : w * f : f]
    K = view.intrinsics.copy()
    K[:2] /= f
    return CameraView(K, view.extrinsics, w, h, img, mask, sky)


def load_frame(
    dir_path,
    vocabulary: ClassVocabulary,
    t: Optional[int] = None,
    max_size: Optional[Sequence[int]] = DEFAULT_MAX_SIZE,
) -> FrameBundle:
    """Read and validate one frame directory.

    Points come back in the world frame and mask ids are expressed in
    ``vocabulary``; names that ``vocabulary`` lacks map to the sentinel.
    Images larger than ``max_size`` (width, height) are downsampled by an
    integer factor.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise FrameLoadError(f"missing frame directory: {root}")

    pts_path = root / "points.bin"
    if not pts_path.is_file():
        raise FrameLoadError(f"missing file: {pts_path}")
    raw = np.fromfile(pts_path, dtype="<f4")
    if raw.size % 3:
        raise FrameFormatError(f"{pts_path}: size is not a multiple of 3 floats")
    points_sensor = raw.reshape(-1, 3).astype(np.float64)

    pose = np.asarray(_read_json(root / "ego_pose.json"), dtype=np.float64)
    if pose.shape != (4, 4):
        raise FrameFormatError(f"{root / 'ego_pose.json'}: expected a 4x4 matrix")
    if not is_rotation(pose[:3, :3], tol=1e-5) or not np.allclose(pose[3], [0, 0, 0, 1]):
        raise FrameValidationError(f"{root / 'ego_pose.json'}: not a rigid transform")

    frame_vocab = ClassVocabulary(tuple(_read_json(root / "vocab.json")))
    view_dirs = sorted(
        (p for p in root.iterdir() if p.is_dir() and re.fullmatch(r"view_\d+", p.name)),
        key=lambda p: int(p.name.split("_")[1]),
    )
    if not view_dirs:
        raise FrameLoadError(f"no view_<m> directories in {root}")

    points_world = points_sensor @ pose[:3, :3].T + pose[:3, 3]

    views = []
    for vd in view_dirs:
        calib = _read_json(vd / "calib.json")
        try:
            K = np.asarray(calib["K"], dtype=np.float64).reshape(3, 3)
            E = np.asarray(calib["E"], dtype=np.float64).reshape(3, 4)
        except (KeyError, ValueError) as exc:
            raise FrameFormatError(f"{vd / 'calib.json'}: need 3x3 'K' and 3x4 'E'") from exc
        image = _read_png(vd / "image.png")
        if image.ndim != 3 or image.shape[2] < 3:
            raise FrameFormatError(f"{vd / 'image.png'}: expected an RGB image")
        image = image[..., :3].astype(np.float64) / 255.0
        mask = _read_png(vd / "mask.png")
        if mask.ndim != 2:
            raise FrameFormatError(f"{vd / 'mask.png'}: expected a single channel")
        if mask.shape != image.shape[:2]:
            raise FrameFormatError(f"{vd}: mask shape {mask.shape} does not match image {image.shape[:2]}")
        mask = mask.astype(np.int64)
        if mask.max(initial=0) > len(frame_vocab):
            raise FrameFormatError(f"{vd / 'mask.png'}: ids beyond vocab.json")
        mask = remap_vocabulary(mask, frame_vocab, vocabulary)
        sky = None
        if (vd / "sky.png").is_file():
            sky = _read_png(vd / "sky.png")
            if sky.ndim == 3:
                sky = sky[..., 0]
            if sky.shape != mask.shape:
                raise FrameFormatError(f"{vd}: sky mask shape {sky.shape} does not match image")
            sky = sky != 0
        h, w = mask.shape
        view = CameraView(K, E, w, h, image, mask, sky)
        if max_size is not None:
            view = _downsample(view, max_size)
        try:
            view.validate(len(vocabulary))
        except ValueError as exc:
            raise FrameValidationError(f"{vd}: {exc}") from exc
        view.depth_uv, view.depth = project_points_to_view(points_world, view)
        views.append(view)

    frame = FrameBundle(t=_frame_index(root) if t is None else int(t), points=points_world, ego_pose=pose, views=views)
    return frame


def read_frame_vocabulary(dir_path) -> list:
    return list(_read_json(Path(dir_path) / "vocab.json"))


def write_frame(dir_path, frame: FrameBundle, vocabulary: ClassVocabulary) -> Path:
    """Write ``frame`` in the directory layout ``load_frame`` reads.

    Mask ids in ``frame`` are interpreted in ``vocabulary``.
    """
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    pose = frame.ego_pose
    inv_R = pose[:3, :3].T
    sensor = (frame.points - pose[:3, 3]) @ inv_R.T
    sensor.astype("<f4").tofile(root / "points.bin")
    (root / "ego_pose.json").write_text(json.dumps(pose.tolist()))
    (root / "vocab.json").write_text(json.dumps(list(vocabulary.names)))
    for m, view in enumerate(frame.views):
        vd = root / f"view_{m}"
        vd.mkdir(exist_ok=True)
        img = np.clip(np.round(view.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(vd / "image.png")
        Image.fromarray(view.sem_mask.astype(np.uint16)).save(vd / "mask.png")
        if view.sky_mask is not None:
            Image.fromarray(view.sky_mask.astype(np.uint8) * 255).save(vd / "sky.png")
        calib = {"K": view.intrinsics.tolist(), "E": view.extrinsics.tolist()}
        (vd / "calib.json").write_text(json.dumps(calib))
    return root
