import json
import logging

import numpy as np
import pytest
import yaml

from occsplat import synth
from occsplat.cli import main
from occsplat.pipeline import ConfigError, load_run_config, parse_run_config, run_sequence, with_overrides
from occsplat.voxelize import read_grid

RIG = synth.CameraRig(width=40, height=30, focal=20.0)


@pytest.fixture(scope="module")
def tiny_seq(tmp_path_factory):
    """Two frames of the moving-box scene with a small rig and the sparse LiDAR."""
    root = tmp_path_factory.mktemp("tiny")
    scene = synth.moving_box_scene(frames=2, cameras=RIG, lidar=synth.SPARSE_LIDAR)
    synth.write_sequence(scene, root / "frames", root / "gt")
    return root, scene


def write_config(root, name, **extra):
    g = synth.DESK_GRID
    data = {
        "grid": {"x_range": list(g.x_range), "y_range": list(g.y_range), "z_range": list(g.z_range), "delta": g.delta},
        "input_dir": str(root / "frames"),
        "output_dir": str(root / name),
        "gt_dir": str(root / "gt"),
        "vocabulary": ["ground", "building", "car"],
        "pipeline": {"iters": 2, "opacity_keep": 0.01},
    }
    data.update(extra)
    path = root / f"{name}.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def test_run_writes_grids_and_metrics(tiny_seq):
    root, scene = tiny_seq
    cfg = write_config(root, "run", write_ply=True, dump_flow=True, loss_log=True)
    assert main(["run", str(cfg), "--dump-renders"]) == 0
    out = root / "run"
    for t in range(2):
        grid, head = read_grid(out / f"occ_{t:04d}.bin")
        assert grid.labels.shape == (80, 80, 16) and head["frame"] == t
        assert head["class_names"] == ["ground", "building", "car"]
        m = json.loads((out / f"metrics_{t:04d}.json").read_text())
        assert 0 <= m["miou"] <= 1 and m["frame"] == t
        assert (out / f"gaussians_{t:04d}.ply").is_file() and (out / f"loss_{t:04d}.csv").is_file()
        assert (out / f"render_{t:04d}_view0_color.png").is_file()
    assert (out / "flow_0001.txt").is_file() and not (out / "flow_0000.txt").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["frames"] == [0, 1]
    assert set(summary["timings_s"]) == {"load", "lift", "move", "optimize", "voxelize", "write"}


def test_delta_override_scales_dims(tiny_seq):
    root, _ = tiny_seq
    cfg = write_config(root, "coarse")
    assert main(["run", str(cfg), "--delta", "0.4", "--iters", "0", "--no-smooth"]) == 0
    grid, head = read_grid(root / "coarse" / "occ_0001.bin")
    assert grid.labels.shape == (40, 40, 8) and head["delta"] == 0.4
    # gt is at 0.2 m, so the coarse run writes no metrics
    assert not (root / "coarse" / "metrics_0001.json").exists()


def test_per_frame_delta_override(tiny_seq):
    root, _ = tiny_seq
    run = load_run_config(write_config(root, "perframe", delta_overrides={1: 0.4}))
    run = with_overrides(run, iters=0)
    run_sequence(run)
    assert read_grid(root / "perframe" / "occ_0000.bin")[0].labels.shape == (80, 80, 16)
    assert read_grid(root / "perframe" / "occ_0001.bin")[0].labels.shape == (40, 40, 8)


def test_nucraft_dims_from_delta_override():
    run = parse_run_config({
        "grid": {"x_range": [-51.2, 51.2], "y_range": [-51.2, 51.2], "z_range": [-5, 3], "delta": 0.4},
        "input_dir": "in", "output_dir": "out",
    })
    assert with_overrides(run, delta=0.2).pipeline.grid.dims == (512, 512, 40)


@pytest.mark.parametrize("bad", [
    "grid: [1, 2",  # malformed YAML
    "input_dir: x\noutput_dir: y\n",  # missing grid
    "grid: {x_range: [0, 1], y_range: [0, 1], z_range: [0, 1], delta: 0.1}\ninput_dir: a\noutput_dir: b\nbogus: 1\n",
    "grid: {x_range: [0, 1], y_range: [0, 1], z_range: [0, 1], delta: -1}\ninput_dir: a\noutput_dir: b\n",
    "grid: {x_range: [0, 1], y_range: [0, 1], z_range: [0, 1], delta: 0.1}\ninput_dir: a\noutput_dir: b\n"
    "pipeline: {iters: 5, not_a_field: 2}\n",
])
def test_bad_config_exit_code(tmp_path, bad, caplog):
    path = tmp_path / "c.yaml"
    path.write_text(bad)
    with caplog.at_level(logging.ERROR):
        assert main(["run", str(path)]) == 2
    assert "bad configuration" in caplog.text


def test_bad_override_exit_code(tiny_seq):
    root, _ = tiny_seq
    assert main(["run", str(write_config(root, "badflag")), "--knn", "-3"]) == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "nope.yaml")
    assert main(["run", str(tmp_path / "nope.yaml")]) == 2


def test_missing_input_dir_exit_code(tmp_path):
    cfg = write_config(tmp_path, "x")
    assert main(["run", str(cfg)]) == 1


def test_corrupt_frame_is_skipped(tmp_path, tiny_seq, caplog):
    root, scene = tiny_seq
    frames = tmp_path / "frames"
    for t in range(2):
        src = root / "frames" / f"frame_{t:04d}"
        dst = frames / src.name
        dst.mkdir(parents=True)
        for p in src.rglob("*"):
            target = dst / p.relative_to(src)
            if p.is_dir():
                target.mkdir(exist_ok=True)
            else:
                target.write_bytes(p.read_bytes())
    (frames / "frame_0000" / "points.bin").unlink()
    cfg = write_config(tmp_path, "out", input_dir=str(frames), gt_dir=None)
    with caplog.at_level(logging.WARNING):
        assert main(["run", str(cfg), "--iters", "0"]) == 0
    assert "skipping frame_0000" in caplog.text
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["frames"] == [1] and summary["skipped"] == ["frame_0000"]


def test_synth_command(tmp_path):
    assert main(["synth", str(tmp_path / "s"), "--frames", "1", "--sparse", "--scene", "static"]) == 0
    data = yaml.safe_load((tmp_path / "s" / "config.yaml").read_text())
    assert data["vocabulary"] == ["ground", "building", "car"]
    run = load_run_config(tmp_path / "s" / "config.yaml")
    assert run.input_dir == tmp_path / "s" / "frames" and run.pipeline.opacity_keep == 0.01
    assert (tmp_path / "s" / "gt" / "occ_0000.bin").is_file()
    assert np.isfinite(run.pipeline.grid.delta)
