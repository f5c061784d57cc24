"""Per-frame test-time refinement: Adam on the splat loss plus periodic smoothing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import FrameBundle, GaussianSet, PipelineConfig, normalize_quats
from .smooth import TRBFParams, smooth_semantics
from .splat import loss_and_gradients

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
PARAMS = ("mu", "color", "opacity_raw", "scale_raw", "quat")


@dataclass
class OptimizeResult:
    gaussians: GaussianSet
    initial_loss: float
    final_loss: float
    history: list = field(default_factory=list)  # (iter, photo, depth) per evaluated iterate
    diverged: bool = False


def step_sizes(cfg: PipelineConfig, delta: float) -> dict:
    return {
        "mu": cfg.lr_mu * delta,
        "color": cfg.lr_color,
        "opacity_raw": cfg.lr_opacity,
        "scale_raw": cfg.lr_scale,
        "quat": cfg.lr_quat,
    }


class Adam:
    def __init__(self, gaussians: GaussianSet, lr: dict):
        self.lr = dict(lr)
        self.m = {p: np.zeros_like(getattr(gaussians, p)) for p in PARAMS}
        self.v = {p: np.zeros_like(getattr(gaussians, p)) for p in PARAMS}
        self.count = 0

    def state(self):
        return {p: self.m[p].copy() for p in PARAMS}, {p: self.v[p].copy() for p in PARAMS}, self.count

    def restore(self, state) -> None:
        self.m, self.v, self.count = state[0], state[1], state[2]

    def step(self, gaussians: GaussianSet, grads) -> GaussianSet:
        self.count += 1
        out = gaussians.copy()
        g_all = grads.arrays()
        c1 = 1.0 - BETA1**self.count
        c2 = 1.0 - BETA2**self.count
        for p in PARAMS:
            g = g_all[p]
            self.m[p] = BETA1 * self.m[p] + (1 - BETA1) * g
            self.v[p] = BETA2 * self.v[p] + (1 - BETA2) * g * g
            update = self.lr[p] * (self.m[p] / c1) / (np.sqrt(self.v[p] / c2) + ADAM_EPS)
            setattr(out, p, getattr(out, p) - update)
        out.quat = normalize_quats(out.quat)
        out.color = np.clip(out.color, 0.0, 1.0)
        return out


def _finite(gs: GaussianSet) -> bool:
    return all(np.all(np.isfinite(getattr(gs, p))) for p in PARAMS)


def optimize_frame(
    gaussians: GaussianSet,
    frame: FrameBundle,
    cfg: PipelineConfig,
    log_path: Optional[Path] = None,
) -> OptimizeResult:
    """Run ``cfg.iters`` Adam steps on ``gaussians`` against ``frame``.

    Semantics are only touched by the smoothing pass every
    ``cfg.smooth_every`` steps. A step that produces a non-finite loss,
    gradient or parameter is retried once with all step sizes halved; if that
    fails too, the best iterate so far is returned with ``diverged`` set.
    """
    if cfg.iters == 0 or len(gaussians) == 0:
        return OptimizeResult(gaussians, float("nan"), float("nan"))
    params = TRBFParams.from_config(cfg)
    opt = Adam(gaussians, step_sizes(cfg, gaussians.delta))
    current = gaussians.copy()
    loss, grads = loss_and_gradients(current, frame, cfg)
    initial = loss
    history = [(0, grads.photo, grads.depth)]
    best, best_loss = current, loss
    diverged = False

    for it in range(1, cfg.iters + 1):
        state = opt.state()
        candidate = None
        for attempt in range(2):
            if not (np.isfinite(loss) and grads.is_finite()):
                break
            trial = opt.step(current, grads)
            if cfg.use_smooth and cfg.knn > 0 and it % cfg.smooth_every == 0:
                trial.sem = smooth_semantics(trial, params, cfg.knn)
            trial_loss, trial_grads = loss_and_gradients(trial, frame, cfg)
            if _finite(trial) and np.isfinite(trial_loss) and trial_grads.is_finite():
                candidate = (trial, trial_loss, trial_grads)
                break
            log.warning("non-finite step at iteration %d, halving step sizes", it)
            opt.restore(state)
            opt.lr = {p: lr * 0.5 for p, lr in opt.lr.items()}
            state = opt.state()
        if candidate is None:
            diverged = True
            break
        current, loss, grads = candidate
        history.append((it, grads.photo, grads.depth))
        if loss < best_loss:
            best, best_loss = current, loss

    if diverged:
        # semantics are not part of the loss; keep the smoothed ones of the last good iterate
        best = best.copy()
        best.sem = current.sem.copy()
        current, loss = best, best_loss
    if log_path is not None:
        write_loss_log(log_path, history)
    return OptimizeResult(current, initial, loss, history, diverged)


def write_loss_log(path, history) -> None:
    lines = [f"{it},{photo:.8f},{depth:.8f}" for it, photo, depth in history]
    Path(path).write_text("iter,loss_photo,loss_depth\n" + "\n".join(lines) + "\n")
