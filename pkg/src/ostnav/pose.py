"""Single-shot pose from keypoints (EPnP plus Gauss-Newton) and pose error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraModel,
    KeypointModel,
    Roi,
    dcm_to_quat,
    quat_normalize,
    quat_to_dcm,
    skew,
)
from .heatmap import KeypointMeasurement

# zeroing thresholds for calibrated errors
T_ZERO_RATIO = 2.173e-3  # m of error per m of range
Q_ZERO_DEG = 0.169


class TooFewPoints(ValueError):
    pass


class DegenerateGeometry(ValueError):
    pass


class InsufficientSpan(ValueError):
    """Error log does not cover two orbital periods."""


@dataclass(frozen=True)
class Pose:
    t: np.ndarray  # target origin in camera frame (m)
    q: np.ndarray  # target body -> camera

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=float).reshape(4)))


@dataclass(frozen=True)
class ErrorReport:
    e_t: float
    e_q: float
    e_t_calibrated: float
    e_q_calibrated: float


# ----------------------------------------------------------------------- EPnP


def _control_points(pts: np.ndarray):
    c0 = pts.mean(axis=0)
    d = pts - c0
    _, s, vt = np.linalg.svd(d, full_matrices=False)
    if s[1] < 1e-9 * max(s[0], 1e-300):
        raise DegenerateGeometry("keypoints are collinear")
    planar = s[2] < 1e-6 * s[0]
    n_axes = 2 if planar else 3
    scale = s[:n_axes] / np.sqrt(pts.shape[0])
    ctrl = np.vstack([c0, c0 + scale[:, None] * vt[:n_axes]])
    return ctrl, planar


def _barycentric(pts: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    B = (ctrl[1:] - ctrl[0]).T  # 3 x (nc-1)
    a = np.linalg.lstsq(B, (pts - ctrl[0]).T, rcond=None)[0].T
    return np.hstack([1.0 - a.sum(axis=1, keepdims=True), a])


def _betas_from_nullspace(V: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    """Null-space weights that reproduce the control-point distances.

    Linearized products ``beta_i beta_j`` by least squares, then Gauss-Newton
    on the distance residuals.
    """
    nc = ctrl.shape[0]
    N = V.shape[1]
    ii, jj = np.triu_indices(nc, 1)
    vecs = V.T.reshape(N, nc, 3)
    dv = np.transpose(vecs[:, ii] - vecs[:, jj], (1, 0, 2))  # pairs x N x 3
    dist2 = np.sum((ctrl[ii] - ctrl[jj]) ** 2, axis=1)
    a_idx, b_idx = np.triu_indices(N)
    L = np.einsum("pak,pbk->pab", dv, dv)[:, a_idx, b_idx] * np.where(a_idx == b_idx, 1.0, 2.0)
    rho = np.linalg.lstsq(L, dist2, rcond=None)[0]
    beta = np.zeros(N)
    beta[0] = np.sqrt(abs(rho[0]))
    if beta[0] > 0:
        beta[1:] = rho[1:N] / beta[0]  # products beta_1 beta_j come first
    cost, prev = np.inf, beta
    for _ in range(6):
        e = np.einsum("pnk,n->pk", dv, beta)
        res = np.sum(e * e, axis=1) - dist2
        c = res @ res
        if c >= cost * (1.0 - 1e-12):
            return prev if c > cost else beta
        cost, prev = c, beta
        J = 2.0 * np.einsum("pnk,pk->pn", dv, e)
        try:
            step = np.linalg.solve(J.T @ J, -J.T @ res)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
    return beta


def _absolute_orientation(body: np.ndarray, camf: np.ndarray):
    """Least-squares ``R, t`` with ``camf = R body + t``."""
    mb, mc = body.mean(axis=0), camf.mean(axis=0)
    H = (camf - mc).T @ (body - mb)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, mc - R @ mb


def _reproj(R, t, pts, uv_n):
    X = pts @ R.T + t
    if np.any(X[:, 2] <= 0):
        return np.inf
    return float(np.sum((X[:, :2] / X[:, 2:] - uv_n) ** 2))


def epnp(pts: np.ndarray, uv_n: np.ndarray):
    """Closed-form pose from normalized image coordinates ``uv_n`` (n, 2).

    Returns ``(R, t)`` of the candidate with positive depth and the lowest
    reprojection error among null-space dimensions 1..4.
    """
    pts = np.asarray(pts, dtype=float)
    uv_n = np.asarray(uv_n, dtype=float)
    ctrl, planar = _control_points(pts)
    nc = ctrl.shape[0]
    alphas = _barycentric(pts, ctrl)
    n = pts.shape[0]
    M = np.zeros((2 * n, 3 * nc))
    for j in range(nc):
        M[0::2, 3 * j] = alphas[:, j]
        M[0::2, 3 * j + 2] = -alphas[:, j] * uv_n[:, 0]
        M[1::2, 3 * j + 1] = alphas[:, j]
        M[1::2, 3 * j + 2] = -alphas[:, j] * uv_n[:, 1]
    _, _, Vt = np.linalg.svd(M.T @ M)
    best = None
    for N in range(1, min(4, 3 * nc) + 1):
        V = Vt[-N:][::-1].T
        beta = _betas_from_nullspace(V, ctrl)
        cc = (V @ beta).reshape(nc, 3)
        if np.mean(cc[:, 2]) < 0:
            cc = -cc
        camf = alphas @ cc
        R, t = _absolute_orientation(pts, camf)
        err = _reproj(R, t, pts, uv_n)
        if best is None or err < best[0]:
            best = (err, R, t)
    if best is None or not np.isfinite(best[0]):
        raise DegenerateGeometry("no candidate with all points in front of the camera")
    return best[1], best[2]


def _rotvec_dcm(rv: np.ndarray) -> np.ndarray:
    th = float(np.linalg.norm(rv))
    K = skew(rv)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1.0 - np.cos(th)) / th**2 * K @ K


def _refine(R, t, pts, uv, cam: CameraModel, W, iters: int = 10, tol: float = 1e-8):
    """Weighted Gauss-Newton reprojection polish in full-frame pixels.

    ``W`` is ``(n, 2, 2)`` square-root information (whitening) matrices.
    """

    def residual(R, t):
        X = pts @ R.T + t
        u = cam.fx * X[:, 0] / X[:, 2] + cam.cx
        v = cam.fy * X[:, 1] / X[:, 2] + cam.cy
        e = np.stack([u, v], axis=1) - uv
        return np.einsum("nij,nj->ni", W, e).ravel(), X

    r, X = residual(R, t)
    cost = r @ r
    for _ in range(iters):
        z = X[:, 2]
        Jp = np.zeros((len(pts), 2, 3))
        Jp[:, 0, 0] = cam.fx / z
        Jp[:, 0, 2] = -cam.fx * X[:, 0] / z**2
        Jp[:, 1, 1] = cam.fy / z
        Jp[:, 1, 2] = -cam.fy * X[:, 1] / z**2
        RP = pts @ R.T
        dX = np.zeros((len(pts), 3, 6))
        # d(R p)/d(theta) = -[R p]x for a left perturbation
        dX[:, 0, 1], dX[:, 0, 2] = RP[:, 2], -RP[:, 1]
        dX[:, 1, 0], dX[:, 1, 2] = -RP[:, 2], RP[:, 0]
        dX[:, 2, 0], dX[:, 2, 1] = RP[:, 1], -RP[:, 0]
        dX[:, :, 3:] = np.eye(3)
        J = np.einsum("nij,njk,nkl->nil", W, Jp, dX).reshape(-1, 6)
        try:
            step = np.linalg.solve(J.T @ J, -J.T @ r)
        except np.linalg.LinAlgError:
            break
        Rn = _rotvec_dcm(step[:3]) @ R
        tn = t + step[3:]
        rn, Xn = residual(Rn, tn)
        cn = rn @ rn
        if not (np.all(Xn[:, 2] > 0) and cn <= cost):
            break
        done = cost - cn < tol
        R, t, r, X, cost = Rn, tn, rn, Xn, cn
        if done:
            break
    return R, t


def solve_pnp(meas: KeypointMeasurement, model: KeypointModel, cam: CameraModel,
              roi: Roi | None = None, weighted: bool = True) -> Pose:
    """Pose of the target from its valid keypoints.

    ``meas`` lives in the crop frame of ``roi`` (full frame when ``roi`` is
    ``None``). The covariances weight only the refinement stage.
    """
    if roi is not None:
        meas = meas.to_full_frame(roi)
    idx = np.flatnonzero(meas.valid)
    if idx.size < 4:
        raise TooFewPoints(f"{idx.size} valid keypoints, need 4")
    pts = model.points[idx]
    if np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9) < 2:
        raise DegenerateGeometry("keypoint subset is degenerate")
    uv = meas.points[idx]
    uv_n = np.stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy], axis=1)
    R, t = epnp(pts, uv_n)
    if weighted:
        try:
            W = np.linalg.inv(np.linalg.cholesky(meas.cov[idx]))
        except np.linalg.LinAlgError:
            W = np.broadcast_to(np.eye(2), (idx.size, 2, 2))
    else:
        W = np.broadcast_to(np.eye(2), (idx.size, 2, 2))
    R, t = _refine(R, t, pts, uv, cam, W)
    return Pose(t, dcm_to_quat(R))


def reprojection_rms(pose: Pose, model: KeypointModel, cam: CameraModel, uv: np.ndarray) -> float:
    X = model.points @ quat_to_dcm(pose.q).T + pose.t
    u = cam.fx * X[:, 0] / X[:, 2] + cam.cx
    v = cam.fy * X[:, 1] / X[:, 2] + cam.cy
    return float(np.sqrt(np.mean((u - uv[:, 0]) ** 2 + (v - uv[:, 1]) ** 2)))


# -------------------------------------------------------------------- metrics


def rotation_error_deg(q_est, q_true) -> float:
    """``2 arccos |<q_est, q_true>|`` in degrees.

    Evaluated from the chord lengths ``|a - s b|`` and ``|a + s b|`` with
    ``s`` the sign of the inner product: exact under a sign flip of either
    argument and accurate at small angles.
    """
    a = quat_normalize(np.asarray(q_est, dtype=float))
    b = quat_normalize(np.asarray(q_true, dtype=float))
    if a @ b < 0.0:
        b = -b
    return float(np.degrees(4.0 * np.arctan2(np.linalg.norm(a - b), np.linalg.norm(a + b))))


def pose_errors(est: Pose, truth: Pose) -> ErrorReport:
    e_t = float(np.linalg.norm(est.t - truth.t))
    e_q = rotation_error_deg(est.q, truth.q)
    rng = float(np.linalg.norm(truth.t))
    zero_t = rng > 0 and e_t / rng < T_ZERO_RATIO
    return ErrorReport(e_t, e_q, 0.0 if zero_t else e_t, 0.0 if e_q < Q_ZERO_DEG else e_q)


def steady_state_errors(reports, times, orbit_period: float, calibrated: bool = False):
    """Mean ``(e_t, e_q)`` over epochs with ``T <= t <= 2T``.

    The log must run to the last sampling instant at or before ``2T``, i.e.
    one more epoch would pass ``2T``.
    """
    times = np.asarray(times, dtype=float)
    if len(reports) != times.size or times.size < 2:
        raise InsufficientSpan("need at least two epochs with matching times")
    cadence = float(np.median(np.diff(times)))
    if times[-1] + cadence <= 2.0 * orbit_period:
        raise InsufficientSpan(f"log ends at {times[-1]:.1f} s, second orbit ends at {2 * orbit_period:.1f} s")
    sel = (times >= orbit_period) & (times <= 2.0 * orbit_period)
    if calibrated:
        et = np.array([r.e_t_calibrated for r in reports])
        eq = np.array([r.e_q_calibrated for r in reports])
    else:
        et = np.array([r.e_t for r in reports])
        eq = np.array([r.e_q for r in reports])
    return float(et[sel].mean()), float(eq[sel].mean())

