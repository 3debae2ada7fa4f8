"""Keypoint predictor used in place of a flight network.

A synthetic detector renders keypoint heatmaps corrupted by a view-dependent
bias field, noise and outliers. A small residual MLP maps the decoded
keypoints to coordinate corrections and re-renders sigma=2 blobs, which makes
the heatmap MSE loss differentiable in closed form w.r.t. all parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .heatmap import (
    BLOB_SIGMA,
    CROP_SIZE,
    HEATMAP_SIZE,
    KeypointMeasurement,
    crop_per_heatmap,
    measure,
    render_blobs,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class GapModel:
    """Parametric sim2real corruption of the detector (crop pixels)."""

    bias_amp: float = 4.0
    bias_freq: float = 3.0
    noise_sigma: float = 1.0
    outlier_prob: float = 0.05
    outlier_spread: float = 30.0
    blob_sigma_inflation: float = 1.5
    field_seed: int = 7

    def __post_init__(self):
        vals = (self.bias_amp, self.bias_freq, self.noise_sigma, self.outlier_prob,
                self.outlier_spread)
        if any(v < 0 for v in vals):
            raise ValueError("gap parameters must be nonnegative")
        if self.outlier_prob > 0.5:
            raise ValueError("outlier_prob above 0.5 is unidentifiable")
        if self.blob_sigma_inflation < 1.0:
            raise ValueError("blob_sigma_inflation must be >= 1")

    @classmethod
    def zero(cls) -> "GapModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 1.0)

    def scaled(self, severity: float) -> "GapModel":
        """Same corruption with amplitudes multiplied by ``severity``."""
        return replace(
            self,
            bias_amp=self.bias_amp * severity,
            noise_sigma=self.noise_sigma * severity,
            outlier_prob=min(self.outlier_prob * severity, 0.5),
            blob_sigma_inflation=1.0 + (self.blob_sigma_inflation - 1.0) * severity,
        )


def bias_directions(K: int, seed: int):
    """Fixed per-keypoint unit vectors ``(u_k, v_k)`` of the bias field."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(K, 3))
    v = rng.normal(size=(K, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return u, v


def bias_field(view_dir, gap: GapModel, K: int) -> np.ndarray:
    """Smooth view-dependent keypoint offsets ``(K, 2)`` in crop pixels."""
    d = np.asarray(view_dir, dtype=float)
    d = d / np.linalg.norm(d)
    u, v = bias_directions(K, gap.field_seed)
    f = gap.bias_freq
    return gap.bias_amp * np.stack([np.sin(f * (u @ d)), np.cos(f * (v @ d))], axis=1)


def detect(truth_px, view_dir, gap: GapModel, rng: np.random.Generator,
           hm_size: int = HEATMAP_SIZE, out_size: int = CROP_SIZE) -> np.ndarray:
    """Raw detector heatmaps for crop-frame keypoints ``truth_px`` (K, 2)."""
    truth_px = np.asarray(truth_px, dtype=float)
    K = truth_px.shape[0]
    # draws happen unconditionally so the stream is independent of the gap values
    noise = rng.normal(size=(K, 2)) * gap.noise_sigma
    is_out = rng.uniform(size=K) < gap.outlier_prob
    rad = gap.outlier_spread * np.sqrt(rng.uniform(size=K))
    ang = rng.uniform(0.0, 2 * np.pi, size=K)
    jump = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1) * is_out[:, None]
    centers = truth_px + noise + jump
    if gap.bias_amp > 0:
        centers = centers + bias_field(view_dir, gap, K)
    sigma = BLOB_SIGMA * gap.blob_sigma_inflation
    hm = centers / crop_per_heatmap(hm_size, out_size)
    return render_blobs(hm, sigma, (hm_size, hm_size))


# ----------------------------------------------------------------------- MLP


@dataclass
class PredictorParams:
    """Flat MLP parameters plus AdamW moments."""

    theta: np.ndarray
    dims: tuple
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.size != param_count(self.dims):
            raise ValueError("parameter vector does not match architecture")
        if self.m is None:
            self.m = np.zeros_like(self.theta)
        if self.v is None:
            self.v = np.zeros_like(self.theta)

    @property
    def P(self) -> int:
        return self.theta.size

    def layers(self, theta=None):
        return unpack(self.theta if theta is None else theta, self.dims)

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha1(self.theta.tobytes()).hexdigest()

    def copy(self) -> "PredictorParams":
        return PredictorParams(self.theta.copy(), self.dims, self.m.copy(), self.v.copy(), self.step)


def param_count(dims) -> int:
    return sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))


def unpack(theta: np.ndarray, dims):
    """Views ``[(W1, b1), (W2, b2), ...]`` into the flat vector."""
    out, k = [], 0
    for i, o in zip(dims[:-1], dims[1:]):
        W = theta[k:k + o * i].reshape(o, i)
        k += o * i
        b = theta[k:k + o]
        k += o
        out.append((W, b))
    return out


def init_params(K: int = 11, hidden: int = 64, seed: int = 0,
                zero_output: bool = True) -> PredictorParams:
    """Glorot-uniform hidden layers; output layer zero for an identity start."""
    dims = (2 * K, hidden, hidden, 2 * K)
    rng = np.random.default_rng(seed)
    theta = np.zeros(param_count(dims))
    for li, (W, _) in enumerate(unpack(theta, dims)):
        if li == len(dims) - 2 and zero_output:
            continue
        lim = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-lim, lim, size=W.shape)
    return PredictorParams(theta, dims)


@dataclass
class PredictorOutput:
    stack: np.ndarray
    coords: np.ndarray  # (2K,) crop pixels, corrected
    valid: np.ndarray
    detected: KeypointMeasurement
    cache: dict = field(repr=False, default_factory=dict)

    def measurement(self) -> KeypointMeasurement:
        """Corrected keypoints with the detector's heatmap covariances."""
        return KeypointMeasurement(self.coords.copy(), self.detected.cov.copy(), self.valid.copy())


def normalize_coords(c: np.ndarray, out_size: int = CROP_SIZE) -> np.ndarray:
    half = 0.5 * (out_size - 1)
    return (c - half) / half


def forward(params: PredictorParams, detected: np.ndarray, out_scale: float = 4.0,
            sigma: float = BLOB_SIGMA) -> PredictorOutput:
    """Decode the raw heatmaps, apply the residual correction and re-render.

    ``out_scale`` is the correction in crop pixels per unit network output.
    Invalid keypoints keep their raw heatmap and get no correction.
    """
    detected = np.asarray(detected, dtype=float)
    K, hh, wh = detected.shape
    meas = measure(detected)
    valid = meas.valid
    mask = np.repeat(valid, 2)
    c = np.where(mask, meas.y, 0.0)
    x = np.where(mask, normalize_coords(c), 0.0)
    (W1, b1), (W2, b2), (W3, b3) = params.layers()
    a1 = np.tanh(W1 @ x + b1)
    a2 = np.tanh(W2 @ a1 + b2)
    o = W3 @ a2 + b3
    delta = np.where(mask, out_scale * o, 0.0)
    coords = np.where(mask, c + delta, meas.y)
    scale = crop_per_heatmap(hh, CROP_SIZE)
    centers = np.where(mask, coords, 0.0).reshape(K, 2) / scale
    stack = render_blobs(centers, sigma, (hh, wh))
    stack[~valid] = detected[~valid]
    cache = dict(x=x, a1=a1, a2=a2, mask=mask, centers=centers, scale=scale,
                 out_scale=out_scale, sigma=sigma, dims=params.dims, theta=params.theta.copy())
    return PredictorOutput(stack, coords, valid.copy(), meas, cache)


def backward(out: PredictorOutput, pl: np.ndarray) -> np.ndarray:
    """Exact gradient of ``mse_loss(out.stack, pl)`` w.r.t. the parameters."""
    c = out.cache
    K, hh, wh = out.stack.shape
    sigma = c["sigma"]
    D = (2.0 / K) * (out.stack - np.asarray(pl, dtype=float))
    D[~out.valid] = 0.0
    G = out.stack
    ux = np.arange(wh)[None, None, :] - c["centers"][:, 0, None, None]
    vy = np.arange(hh)[None, :, None] - c["centers"][:, 1, None, None]
    DG = D * G / sigma**2
    g_center = np.stack([np.sum(DG * ux, axis=(1, 2)), np.sum(DG * vy, axis=(1, 2))], axis=1)
    g_o = (g_center.reshape(-1) / c["scale"]) * c["out_scale"] * c["mask"]
    (W1, b1), (W2, b2), (W3, b3) = unpack(c["theta"], c["dims"])
    a1, a2, x = c["a1"], c["a2"], c["x"]
    g_z2 = (W3.T @ g_o) * (1.0 - a2**2)
    g_z1 = (W2.T @ g_z2) * (1.0 - a1**2)
    grads = [(np.outer(g_z1, x), g_z1), (np.outer(g_z2, a1), g_z2), (np.outer(g_o, a2), g_o)]
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def optimizer_step(params: PredictorParams, grad: np.ndarray, lr: float, wd: float,
                   beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                   eps: float = ADAM_EPS) -> PredictorParams:
    """One AdamW step with decoupled weight decay; returns new params."""
    step = params.step + 1
    m = beta1 * params.m + (1 - beta1) * grad
    v = beta2 * params.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    theta = params.theta - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * wd * params.theta
    assert np.all(np.isfinite(theta)), "non-finite parameters after update"
    return PredictorParams(theta, params.dims, m, v, step)


# ---------------------------------------------------------------- checkpoints


def save_params(path, params: PredictorParams) -> None:
    """Header: little-endian ``uint32`` P, layer count, layer widths, step.
    Body: ``float64`` theta, m, v."""
    dims = tuple(int(d) for d in params.dims)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2I", params.P, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<I", params.step))
        for arr in (params.theta, params.m, params.v):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_params(path) -> PredictorParams:
    with open(path, "rb") as fh:
        P, nd = struct.unpack("<2I", fh.read(8))
        dims = struct.unpack(f"<{nd}I", fh.read(4 * nd))
        (step,) = struct.unpack("<I", fh.read(4))
        body = np.frombuffer(fh.read(), dtype="<f8")
    if body.size != 3 * P or param_count(dims) != P:
        raise ValueError("corrupt parameter checkpoint")
    theta, m, v = (body[i * P:(i + 1) * P].astype(float) for i in range(3))
    return PredictorParams(theta, tuple(dims), m, v, step)
