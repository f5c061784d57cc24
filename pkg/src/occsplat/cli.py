"""Command line entry point: ``occsplat run CONFIG`` and ``occsplat synth OUT_DIR``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .pipeline import ConfigError, load_run_config, run_sequence, with_overrides

log = logging.getLogger("occsplat")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occsplat", description="Test-time semantic occupancy from Gaussians.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="process a frame sequence")
    run.add_argument("config", type=Path)
    run.add_argument("--delta", type=float, help="voxel size in meters")
    run.add_argument("--iters", type=int, help="optimization steps per frame")
    run.add_argument("--knn", type=int, help="smoothing neighbours")
    run.add_argument("--tau", type=float, help="static/dynamic flow threshold, m/frame")
    run.add_argument("--no-flow", action="store_true", help="treat every Gaussian as static")
    run.add_argument("--no-smooth", action="store_true", help="disable semantic smoothing")
    run.add_argument("--no-scale-voxel", action="store_true", help="center-scatter voxelization")
    run.add_argument("--dump-renders", action="store_true", help="write rendered color/depth images")
    run.add_argument("--gt-dir", type=Path, help="directory with occ_<t>.bin ground truth")
    run.add_argument("--output-dir", type=Path, help="override the configured output directory")

    synth = sub.add_parser("synth", help="write a synthetic sequence with ground truth")
    synth.add_argument("out_dir", type=Path)
    synth.add_argument("--scene", choices=("moving", "static", "vocabulary"), default="moving")
    synth.add_argument("--frames", type=int, default=6)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--label-noise", type=float, default=0.0)
    synth.add_argument("--sparse", action="store_true", help="32-channel LiDAR")
    return parser


def _run(args) -> int:
    try:
        run = load_run_config(args.config)
        run = with_overrides(
            run,
            delta=args.delta,
            iters=args.iters,
            knn=args.knn,
            tau_static=args.tau,
            use_flow=False if args.no_flow else None,
            use_smooth=False if args.no_smooth else None,
            scale_aware=False if args.no_scale_voxel else None,
        )
    except (ConfigError, ValueError, TypeError) as exc:
        log.error("bad configuration: %s", exc)
        return 2
    if args.dump_renders:
        run = replace(run, dump_renders=True)
    if args.gt_dir is not None:
        run = replace(run, gt_dir=args.gt_dir)
    if args.output_dir is not None:
        run = replace(run, output_dir=args.output_dir)
    try:
        summary = run_sequence(run)
    except OSError as exc:
        log.error("%s", exc)
        return 1
    for name, seconds in summary.timings.items():
        log.info("stage %-9s %8.2f s", name, seconds)
    if summary.metrics:
        last = summary.metrics[max(summary.metrics)]
        log.info("final frame mIoU %.4f", last["miou"])
    return 0


def _synth(args) -> int:
    from . import synth

    if args.scene == "static":
        scene = synth.moving_box_scene(args.frames, args.seed, args.label_noise, moving=False)
    elif args.scene == "vocabulary":
        scene = synth.vocabulary_scene(args.frames, seed=args.seed, label_noise=args.label_noise)
    else:
        scene = synth.moving_box_scene(args.frames, args.seed, args.label_noise)
    if args.sparse:
        scene = replace(scene, lidar=synth.SPARSE_LIDAR)
    out = args.out_dir
    synth.write_sequence(scene, out / "frames", out / "gt")
    g = scene.grid
    config = {
        "grid": {"x_range": list(g.x_range), "y_range": list(g.y_range), "z_range": list(g.z_range), "delta": g.delta},
        "input_dir": "frames",
        "output_dir": "out",
        "gt_dir": "gt",
        "vocabulary": list(scene.vocabulary(0).names),
        "pipeline": {"opacity_keep": 0.01},
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    log.info("wrote %d frames to %s", scene.frames, out)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return _run(args)
    return _synth(args)


if __name__ == "__main__":
    sys.exit(main())
