"""Attitude parameterizations, pinhole projection and RoI crop geometry.

Quaternions are numpy arrays ordered ``[w, x, y, z]`` (scalar first) and
compose with the Hamilton product. ``quat_to_dcm(q)`` is the active rotation
matrix, so for the relative attitude of a target body with respect to the
camera, ``x_cam = quat_to_dcm(q) @ x_body + t``.

MRPs use ``p = e * tan(theta / 4)`` with the shadow set selected whenever
``|p| > 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class BehindCamera(ValueError):
    """At least one point has non-positive depth in the camera frame."""


IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------- quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonicalize(q: np.ndarray) -> np.ndarray:
    """Return the unit quaternion with non-negative scalar part."""
    q = quat_normalize(q)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product ``p * q``; broadcasts over leading axes."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    """Exponential map of a rotation vector; broadcasts over leading axes."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x with its series near zero
    small = angle < 1e-8
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), k * rv], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_canonicalize(q)
    vn = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(vn, q[..., :1])
    small = vn < 1e-12
    k = np.where(small, 2.0, angle / np.where(small, 1.0, vn))
    return k * q[..., 1:]


def quat_to_dcm(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (defensively normalized) quaternion."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def dcm_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a canonical (w >= 0) unit quaternion."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    i = int(np.argmax([tr, *diag]))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_canonicalize(np.array(q))


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ----------------------------------------------------------------------- MRPs


def mrp_shadow(p: np.ndarray) -> np.ndarray:
    """Switch to the shadow set wherever ``|p| > 1``."""
    p = np.asarray(p, dtype=float)
    n2 = np.sum(p * p, axis=-1, keepdims=True)
    return np.where(n2 > 1.0, -p / np.where(n2 > 1.0, n2, 1.0), p)


def mrp_to_quat(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    n2 = np.sum(p * p, axis=-1, keepdims=True)
    return np.concatenate([(1.0 - n2) / (1.0 + n2), 2.0 * p / (1.0 + n2)], axis=-1)


def quat_to_mrp(q: np.ndarray) -> np.ndarray:
    # canonical sign keeps |p| <= 1, i.e. the shadow set near theta = 2*pi
    q = quat_canonicalize(q)
    return q[..., 1:] / (1.0 + q[..., :1])


# -------------------------------------------------------------------- camera


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    heatmap_downscale: int = 4

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Roi:
    """Square crop of the full frame, resampled to ``out_size`` pixels."""

    x0: float
    y0: float
    side: float
    out_size: int = 256

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError("RoI side must be positive")

    @property
    def scale(self) -> float:
        """Crop pixels per full-frame pixel."""
        return self.out_size / self.side

    def to_crop(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return (px - np.array([self.x0, self.y0])) * self.scale

    def from_crop(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return px / self.scale + np.array([self.x0, self.y0])


@dataclass(frozen=True)
class KeypointModel:
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("keypoints must be a (K, 3) array")
        if pts.shape[0] < 4:
            raise ValueError("at least 4 keypoints are needed for PnP")
        if np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9) < 2:
            raise ValueError("keypoints are collinear")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def K(self) -> int:
        return self.points.shape[0]

    @classmethod
    def from_json(cls, path) -> "KeypointModel":
        with open(path) as fh:
            return cls(np.array(json.load(fh)["points"], dtype=float))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"points": self.points.tolist()}, indent=2))


def default_keypoints() -> KeypointModel:
    """Eleven keypoints of a small box-bodied satellite with a flat antenna
    panel (roughly 0.56 x 0.56 x 0.3 m bus), in meters."""
    bus = [
        [-0.37, -0.385, 0.32],
        [-0.37, 0.385, 0.32],
        [0.37, 0.385, 0.32],
        [0.37, -0.385, 0.32],
        [-0.37, -0.264, 0.0],
        [-0.37, 0.304, 0.0],
        [0.37, 0.304, 0.0],
        [0.37, -0.264, 0.0],
    ]
    antennas = [[-0.54, 0.49, 0.255], [0.31, -0.56, 0.255], [0.54, 0.49, 0.255]]
    pts = np.array(bus + antennas)
    return KeypointModel(pts - pts.mean(axis=0))


def project(r_cam, q_cam, model: KeypointModel | np.ndarray, cam: CameraModel) -> np.ndarray:
    """Full-frame pixel coordinates ``(K, 2)`` of the keypoints.

    ``r_cam`` is the target origin in the camera frame and ``q_cam`` the
    target attitude w.r.t. the camera.
    """
    pts = model.points if isinstance(model, KeypointModel) else np.asarray(model, dtype=float)
    xc = pts @ quat_to_dcm(q_cam).T + np.asarray(r_cam, dtype=float)
    if np.any(xc[:, 2] <= 0.0):
        raise BehindCamera("keypoint behind the camera")
    u = cam.fx * xc[:, 0] / xc[:, 2] + cam.cx
    v = cam.fy * xc[:, 1] / xc[:, 2] + cam.cy
    return np.stack([u, v], axis=1)


def roi_from_keypoints(
    px: np.ndarray,
    margin: float = 1.2,
    cam: CameraModel | None = None,
    floor: float = 32.0,
    out_size: int = 256,
) -> Roi:
    """Square RoI around the keypoints enlarged by ``margin``.

    A zero-area bounding box falls back to a ``floor``-sized square. When
    ``cam`` is given the side is capped at the short image edge and the box
    is shifted to stay inside the frame.
    """
    px = np.asarray(px, dtype=float).reshape(-1, 2)
    lo, hi = px.min(axis=0), px.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float(np.max(hi - lo))
    side = extent * margin if extent > 0 else floor
    x0, y0 = center - 0.5 * side
    if cam is not None:
        side = min(side, float(min(cam.width, cam.height)))
        x0, y0 = center - 0.5 * side
        x0 = float(np.clip(x0, 0.0, cam.width - side))
        y0 = float(np.clip(y0, 0.0, cam.height - side))
    return Roi(float(x0), float(y0), float(side), out_size)


def jittered_roi(roi: Roi, rng: np.random.Generator, shift: float = 0.1,
                 scale_range: tuple[float, float] = (1.0, 1.5)) -> Roi:
    """Train-time RoI perturbation: uniform shift of +-``shift`` x side and
    uniform enlargement in ``scale_range`` about the original center."""
    s = roi.side * rng.uniform(*scale_range)
    cx = roi.x0 + 0.5 * roi.side + rng.uniform(-shift, shift) * roi.side
    cy = roi.y0 + 0.5 * roi.side + rng.uniform(-shift, shift) * roi.side
    return Roi(cx - 0.5 * s, cy - 0.5 * s, s, roi.out_size)
