"""Keypoint heatmaps: rendering, sub-pixel decoding, spread covariance, loss.

A heatmap stack is a ``(K, Hh, Wh)`` float array. Heatmap pixel centers sit
at integer coordinates and a location is ``(x, y) = (column, row)``. The
crop frame (``out_size`` pixels) maps onto the heatmap grid with pixel
centers aligned at both ends, so one heatmap pixel spans
``(out_size - 1) / (Hh - 1)`` crop pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Roi

HEATMAP_SIZE = 64
CROP_SIZE = 256
BLOB_SIGMA = 2.0
COV_FLOOR = 0.25  # crop pix^2 added to every keypoint covariance


class FlatMap(ValueError):
    """Heatmap maximum is below the detection floor."""


class ZeroMass(ValueError):
    """Heatmap total intensity is below the floor."""


def crop_per_heatmap(hm_size: int = HEATMAP_SIZE, out_size: int = CROP_SIZE) -> float:
    return (out_size - 1) / (hm_size - 1)


def crop_to_heatmap(xy, hm_size: int = HEATMAP_SIZE, out_size: int = CROP_SIZE):
    return np.asarray(xy, dtype=float) / crop_per_heatmap(hm_size, out_size)


def heatmap_to_crop(xy, hm_size: int = HEATMAP_SIZE, out_size: int = CROP_SIZE):
    return np.asarray(xy, dtype=float) * crop_per_heatmap(hm_size, out_size)


def render_blob(center, sigma: float = BLOB_SIGMA, shape=(HEATMAP_SIZE, HEATMAP_SIZE)) -> np.ndarray:
    """Unnormalized Gaussian blob with peak value 1 at ``center``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return render_blobs(np.asarray(center, dtype=float)[None], sigma, shape)[0]


def render_blobs(centers, sigma=BLOB_SIGMA, shape=(HEATMAP_SIZE, HEATMAP_SIZE)) -> np.ndarray:
    """Stack of blobs for ``(K, 2)`` centers; ``sigma`` scalar or per-blob."""
    centers = np.asarray(centers, dtype=float)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), centers.shape[:1])
    gx = np.exp(-((np.arange(shape[1])[None, :] - centers[:, :1]) ** 2) / (2 * sig[:, None] ** 2))
    gy = np.exp(-((np.arange(shape[0])[None, :] - centers[:, 1:]) ** 2) / (2 * sig[:, None] ** 2))
    return gy[:, :, None] * gx[:, None, :]


def _refine(lm, l0, lp) -> float:
    den = lm - 2.0 * l0 + lp
    if den >= 0.0:
        return 0.0
    return float(np.clip(0.5 * (lm - lp) / den, -0.5, 0.5))


def decode_peak(hmap: np.ndarray, floor: float = 1e-3):
    """Sub-pixel peak ``(x, y)`` in heatmap pixels and the peak value.

    Log-parabolic fit through the argmax and its 4-neighbours; exact for a
    sampled Gaussian away from the border.
    """
    hmap = np.asarray(hmap, dtype=float)
    j = int(np.argmax(hmap))
    r, c = divmod(j, hmap.shape[1])
    peak = float(hmap[r, c])
    if not peak >= floor:
        raise FlatMap(f"peak {peak:.3g} below floor {floor:.3g}")
    tiny = peak * 1e-12

    def lg(v):
        return np.log(max(float(v), tiny))

    x, y = float(c), float(r)
    l0 = lg(peak)
    if 0 < c < hmap.shape[1] - 1:
        x += _refine(lg(hmap[r, c - 1]), l0, lg(hmap[r, c + 1]))
    if 0 < r < hmap.shape[0] - 1:
        y += _refine(lg(hmap[r - 1, c]), l0, lg(hmap[r + 1, c]))
    return np.array([x, y]), peak


def spread_covariance(hmap: np.ndarray, loc, floor: float = 1e-3) -> np.ndarray:
    """Intensity-weighted second moment about ``loc`` in heatmap pixels^2.

    Weights are the intensities normalized to unit sum over the whole map.
    """
    hmap = np.asarray(hmap, dtype=float)
    total = float(hmap.sum())
    if not total >= floor:
        raise ZeroMass(f"total intensity {total:.3g} below floor {floor:.3g}")
    w = hmap / total
    dx = np.arange(hmap.shape[1]) - loc[0]
    dy = np.arange(hmap.shape[0]) - loc[1]
    wx = w.sum(axis=0)
    wy = w.sum(axis=1)
    cxx = float(wx @ dx**2)
    cyy = float(wy @ dy**2)
    cxy = float(dy @ w @ dx)
    return np.array([[cxx, cxy], [cxy, cyy]])


def mse_loss(pred: np.ndarray, pl: np.ndarray) -> float:
    """Mean over keypoints of the squared Frobenius distance."""
    pred = np.asarray(pred, dtype=float)
    pl = np.asarray(pl, dtype=float)
    if pred.shape != pl.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {pl.shape}")
    return float(np.sum((pred - pl) ** 2) / pred.shape[0])


@dataclass
class KeypointMeasurement:
    """Crop-frame keypoints ``[x1, y1, ..., xK, yK]`` with 2x2 covariances."""

    y: np.ndarray
    cov: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=float).reshape(-1, 2, 2)
        self.cov = 0.5 * (self.cov + np.swapaxes(self.cov, 1, 2))
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if not (self.y.size == 2 * self.K and self.valid.size == self.K):
            raise ValueError("inconsistent keypoint measurement sizes")

    @property
    def K(self) -> int:
        return self.cov.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self.y.reshape(-1, 2)

    def to_full_frame(self, roi: Roi) -> "KeypointMeasurement":
        s = 1.0 / roi.scale
        return KeypointMeasurement(roi.from_crop(self.points), self.cov * s * s, self.valid.copy())


def measure(stack: np.ndarray, roi: Roi | None = None, peak_floor: float = 1e-3,
            cov_floor: float = COV_FLOOR) -> KeypointMeasurement:
    """Decode every map into a crop-frame keypoint and its covariance.

    Failed maps are flagged invalid (NaN location, identity covariance)
    without shifting the indices of the others. ``roi`` only fixes the crop
    resolution.
    """
    stack = np.asarray(stack, dtype=float)
    K, hh, _ = stack.shape
    out_size = CROP_SIZE if roi is None else roi.out_size
    scale = crop_per_heatmap(hh, out_size)
    y = np.full((K, 2), np.nan)
    cov = np.tile(np.eye(2), (K, 1, 1))
    valid = np.zeros(K, dtype=bool)
    for k in range(K):
        try:
            loc, _ = decode_peak(stack[k], peak_floor)
            sig = spread_covariance(stack[k], loc)
        except (FlatMap, ZeroMass):
            continue
        y[k] = loc * scale
        cov[k] = sig * scale**2 + cov_floor * np.eye(2)
        valid[k] = True
    return KeypointMeasurement(y.reshape(-1), cov, valid)


# ------------------------------------------------------------------ file I/O


def save_stack(path, stack: np.ndarray) -> None:
    """Little-endian ``uint32`` header ``K, Hh, Wh`` then ``float32`` data."""
    stack = np.asarray(stack)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *stack.shape))
        fh.write(stack.astype("<f4").tobytes())


def load_stack(path) -> np.ndarray:
    with open(path, "rb") as fh:
        K, hh, wh = struct.unpack("<3I", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != K * hh * wh:
        raise ValueError("truncated heatmap file")
    return data.reshape(K, hh, wh).astype(float)
