"""Sequence driver: per frame lift, move, optimize and voxelize, with artifact output."""

from __future__ import annotations

import json
import logging
import re
import time
from collections import defaultdict
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .core import SENTINEL, GridSpec, PipelineConfig, VoxelGrid
from .eval import metrics, write_metrics
from .flow import FlowField, StaticQueue, enqueue_static, propagate_dynamic, scene_flow, write_flow
from .ingest import DEFAULT_MAX_SIZE, ClassVocabulary, IngestError, load_frame, read_frame_vocabulary
from .lift import instantiate_gaussians
from .optimize import optimize_frame
from .splat import render_view, save_render
from .voxelize import read_grid, read_mask, voxelize, write_grid, write_ply

log = logging.getLogger(__name__)

FRAME_DIR = re.compile(r"frame_(\d+)$")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    pipeline: PipelineConfig
    input_dir: Path
    output_dir: Path
    vocabulary: tuple = ()
    gt_dir: Optional[Path] = None
    delta_overrides: dict = field(default_factory=dict)  # frame index -> voxel size
    dump_renders: bool = False
    write_ply: bool = False
    dump_flow: bool = False
    loss_log: bool = False
    max_image_size: Optional[tuple] = DEFAULT_MAX_SIZE

    def delta_for(self, t: int) -> float:
        return float(self.delta_overrides.get(t, self.pipeline.grid.delta))


_RUN_KEYS = {f.name for f in fields(RunConfig)} | {"grid"}


def parse_run_config(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Build a RunConfig from a parsed config mapping.

    Top-level keys are the RunConfig fields plus ``grid``; ``pipeline`` holds
    PipelineConfig overrides. Relative paths resolve against ``base_dir``.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("grid", "input_dir", "output_dir"):
        if key not in data:
            raise ConfigError(f"config is missing {key!r}")
    pipe = dict(data.get("pipeline") or {})
    pipe["grid"] = data["grid"]
    try:
        pcfg = PipelineConfig.from_dict(pipe)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid pipeline settings: {exc}") from exc

    def path(value):
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base_dir / p

    overrides = {}
    for k, v in (data.get("delta_overrides") or {}).items():
        if not float(v) > 0:
            raise ConfigError(f"delta override for frame {k} must be positive")
        overrides[int(k)] = float(v)
    size = data.get("max_image_size", DEFAULT_MAX_SIZE)
    return RunConfig(
        pipeline=pcfg,
        input_dir=path(data["input_dir"]),
        output_dir=path(data["output_dir"]),
        vocabulary=tuple(data.get("vocabulary") or ()),
        gt_dir=path(data.get("gt_dir")),
        delta_overrides=overrides,
        dump_renders=bool(data.get("dump_renders", False)),
        write_ply=bool(data.get("write_ply", False)),
        dump_flow=bool(data.get("dump_flow", False)),
        loss_log=bool(data.get("loss_log", False)),
        max_image_size=None if size is None else tuple(int(v) for v in size),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    return parse_run_config(data, path.parent)


def with_overrides(run: RunConfig, **changes) -> RunConfig:
    """Copy of ``run`` with PipelineConfig fields (or ``delta``) replaced; None values are ignored."""
    changes = {k: v for k, v in changes.items() if v is not None}
    pcfg = run.pipeline
    if "delta" in changes:
        pcfg = replace(pcfg, grid=pcfg.grid.with_delta(changes.pop("delta")))
    pcfg = replace(pcfg, **changes).validate()
    return replace(run, pipeline=pcfg)


def frame_dirs(input_dir: Path) -> list:
    dirs = [p for p in Path(input_dir).iterdir() if p.is_dir() and FRAME_DIR.match(p.name)]
    return sorted(dirs, key=lambda p: int(FRAME_DIR.match(p.name).group(1)))


def _gt_for(run: RunConfig, t: int, spec: GridSpec, vocab: ClassVocabulary):
    """Ground truth of frame ``t`` remapped into ``vocab`` plus its optional mask, or None."""
    if run.gt_dir is None:
        return None
    path = run.gt_dir / f"occ_{t:04d}.bin"
    if not path.is_file():
        return None
    gt, head = read_grid(path)
    if gt.labels.shape != spec.dims:
        log.warning("frame %d: ground truth dims %s differ from output dims %s, skipping metrics", t, gt.labels.shape, spec.dims)
        return None
    names = head.get("class_names", [])
    lut = np.zeros(max(len(names), int(gt.labels.max(initial=0))) + 1, dtype=np.uint8)
    for i, n in enumerate(names, start=1):
        lut[i] = vocab.id_of(n)
    labels = VoxelGrid(spec, lut[gt.labels])
    mask_path = run.gt_dir / f"mask_{t:04d}.bin"
    mask = read_mask(mask_path) if mask_path.is_file() else None
    return labels, mask


@dataclass
class RunSummary:
    frames: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)  # frame index -> metrics dict
    class_names: tuple = ()


def run_sequence(run: RunConfig) -> RunSummary:
    cfg = run.pipeline
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not Path(run.input_dir).is_dir():
        raise FileNotFoundError(f"input directory {run.input_dir} does not exist")
    dirs = frame_dirs(run.input_dir)
    if not dirs:
        raise FileNotFoundError(f"no frame_<t> directories in {run.input_dir}")

    vocab = ClassVocabulary(tuple(run.vocabulary))
    timings = defaultdict(float)
    summary = RunSummary()
    prev = None
    queue = None

    for fdir in dirs:
        tick = time.perf_counter()
        try:
            grown = vocab.extend(read_frame_vocabulary(fdir))
            frame = load_frame(fdir, grown, max_size=run.max_image_size)
        except (IngestError, OSError, ValueError) as exc:
            log.warning("skipping %s: %s", fdir.name, exc)
            summary.skipped.append(fdir.name)
            continue
        if grown is not vocab:
            log.info("frame %d: vocabulary now %s", frame.t, list(grown.names))
        vocab = grown
        C = len(vocab)
        t = frame.t
        timings["load"] += time.perf_counter() - tick

        tick = time.perf_counter()
        curr = instantiate_gaussians(frame, cfg, C)
        timings["lift"] += time.perf_counter() - tick

        tick = time.perf_counter()
        if queue is None:
            queue = StaticQueue(cfg.grid, C)
        queue.grow_classes(C)
        if prev is not None:
            prev = prev.with_classes(C)
            flow = scene_flow(prev, curr, cfg) if cfg.use_flow else FlowField.zeros(len(prev))
            if run.dump_flow:
                write_flow(out / f"flow_{t:04d}.txt", flow)
            enqueue_static(prev, flow, cfg.tau_static, queue)
            curr = propagate_dynamic(prev, flow, curr, cfg.tau_static, t)
            queue.evict(frame.ego_position, cfg.queue_range)
        timings["move"] += time.perf_counter() - tick

        tick = time.perf_counter()
        result = optimize_frame(curr, frame, cfg, out / f"loss_{t:04d}.csv" if run.loss_log else None)
        if result.diverged:
            log.warning("frame %d: optimization diverged, kept the best iterate", t)
        curr = result.gaussians
        timings["optimize"] += time.perf_counter() - tick

        tick = time.perf_counter()
        spec = cfg.grid.with_delta(run.delta_for(t)).with_classes(C)
        grid = voxelize(curr, queue, spec, cfg)
        timings["voxelize"] += time.perf_counter() - tick

        tick = time.perf_counter()
        write_grid(out / f"occ_{t:04d}.bin", grid, vocab.names, t)
        if run.write_ply:
            write_ply(out / f"gaussians_{t:04d}.ply", curr)
        if run.dump_renders:
            for m, view in enumerate(frame.views):
                save_render(render_view(curr, view, cfg.trunc_mahal), out / f"render_{t:04d}_view{m}")
        gt = _gt_for(run, t, spec, vocab)
        if gt is not None:
            data = metrics(grid, gt[0], gt[1], vocab.names)
            data["frame"] = t
            write_metrics(out / f"metrics_{t:04d}.json", data)
            summary.metrics[t] = data
            log.info("frame %d: mIoU %.4f", t, data["miou"])
        timings["write"] += time.perf_counter() - tick

        log.info(
            "frame %d: %d gaussians, queue %d, %d occupied voxels, loss %.4f -> %.4f",
            t, len(curr), len(queue), int(np.count_nonzero(grid.labels != SENTINEL)),
            result.initial_loss, result.final_loss,
        )
        summary.frames.append(t)
        prev = curr

    summary.timings = dict(timings)
    summary.class_names = vocab.names
    report = {
        "frames": summary.frames,
        "skipped": summary.skipped,
        "class_names": list(vocab.names),
        "timings_s": {k: round(v, 4) for k, v in summary.timings.items()},
    }
    (out / "summary.json").write_text(json.dumps(report, indent=2) + "\n")
    return summary
