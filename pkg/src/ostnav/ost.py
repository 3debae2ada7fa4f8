"""Online supervised training: filter-made pseudo-labels and single-step updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aukf import NavModel, RelativeState, relative_position_cam
from .geometry import Roi, project
from .heatmap import BLOB_SIGMA, HEATMAP_SIZE, crop_per_heatmap, mse_loss, render_blobs
from .predictor import PredictorOutput, PredictorParams, backward, optimizer_step


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class OstConfig:
    period: int = 10
    lr: float = 1e-3
    wd: float = 0.1
    warmup_epochs: int = 360
    enabled: bool = True
    view_trigger_deg: float | None = None  # train on viewing-direction change instead of period

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.lr < 0 or self.wd < 0:
            raise ValueError("lr and wd must be nonnegative")


@dataclass(frozen=True)
class OstEvent:
    epoch: int
    loss_before: float
    grad_norm: float
    rejected_count: int
    skipped: bool = False


def make_pseudo_labels(state_post: RelativeState, model: NavModel, roi: Roi,
                       hm_size: int = HEATMAP_SIZE, sigma: float = BLOB_SIGMA) -> np.ndarray:
    """Render all K keypoints of the a-posteriori estimate as heatmap blobs.

    Raises BehindCamera when the estimate puts a keypoint behind the camera.
    """
    r_cam = relative_position_cam(model, state_post.alpha, state_post.t)
    px = project(r_cam, state_post.q_ref, model.keypoints, model.cam)
    centers = roi.to_crop(px) / crop_per_heatmap(hm_size, roi.out_size)
    return render_blobs(centers, sigma, (hm_size, hm_size))


def ost_step(params: PredictorParams, out: PredictorOutput, pl: np.ndarray, cfg: OstConfig,
             epoch: int = 0, rejected_count: int = 0):
    """Exactly one optimizer step on a single sample."""
    loss = mse_loss(out.stack, pl)
    grad = backward(out, pl)
    gnorm = float(np.linalg.norm(grad))
    if not (np.isfinite(gnorm) and np.isfinite(loss)):
        return params, OstEvent(epoch, loss if np.isfinite(loss) else float("inf"), gnorm,
                                rejected_count, skipped=True)
    new = optimizer_step(params, grad, cfg.lr, cfg.wd)
    return new, OstEvent(epoch, loss, gnorm, rejected_count)


def should_train(epoch: int, cfg: OstConfig) -> bool:
    return bool(cfg.enabled and epoch >= cfg.warmup_epochs
                and (epoch - cfg.warmup_epochs) % cfg.period == 0)


class ViewTrigger:
    """Fires when the viewing direction has moved by more than a threshold
    since the last event."""

    def __init__(self, threshold_deg: float = 2.0):
        self.threshold = np.deg2rad(threshold_deg)
        self.last = None

    def __call__(self, view_dir) -> bool:
        d = np.asarray(view_dir, dtype=float)
        d = d / np.linalg.norm(d)
        if self.last is not None and np.arccos(np.clip(d @ self.last, -1.0, 1.0)) <= self.threshold:
            return False
        self.last = d
        return True


def schedule(epoch: int, cfg: OstConfig, trigger: ViewTrigger | None, view_dir) -> bool:
    """Either the periodic rule or, when configured, the view-change rule."""
    if cfg.view_trigger_deg is None or trigger is None:
        return should_train(epoch, cfg)
    if not (cfg.enabled and epoch >= cfg.warmup_epochs):
        return False
    return trigger(view_dir)

