"""Adaptive unscented Kalman filter for relative orbit and attitude.

State ``x = [alpha (6), p (3), w (3)]``: quasi-nonsingular ROE, an MRP
attitude step about the reference quaternion ``q_ref`` (body-frame error,
``q = q_ref * dq(p)``) and the relative angular velocity in body axes. The
reference absorbs ``p`` after every propagation and update (USQUE reset).

Sigma points are drawn in scaled coordinates (ROE multiplied by the chief's
semi-major axis) so the covariance square root is well conditioned.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from .dynamics import ChiefOrbit, gve_matrix, propagate_attitude_batch, roe_stm, roe_to_rtn
from .geometry import (
    BehindCamera,
    CameraModel,
    KeypointModel,
    Roi,
    quat_conj,
    quat_mul,
    quat_normalize,
    quat_to_dcm,
    quat_to_mrp,
    quat_to_rotvec,
    mrp_to_quat,
)
from .heatmap import KeypointMeasurement

log = logging.getLogger(__name__)

N_STATE = 12
GATE_PROB = 0.9973  # 3-sigma equivalent
GATE_THRESHOLD = float(chi2.ppf(GATE_PROB, 2))

# camera axes in RTN: boresight along +T, x along +R, y along -N
C_CAM_RTN = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


class FilterDiverged(RuntimeError):
    """The estimate has left the region where the filter means anything."""


class CovarianceNotPsd(FilterDiverged):
    """Covariance square root failed after conditioning."""


class RateAliased(FilterDiverged):
    """A sigma-point rate turns more than half a revolution per step."""


class SingularInnovation(RuntimeError):
    """Innovation covariance is not invertible."""


@dataclass(frozen=True)
class UtConfig:
    alpha_ut: float = 1.0
    beta_ut: float = 2.0
    kappa_ut: float | None = None  # None -> 3 - n

    def weights(self, n: int = N_STATE):
        kappa = 3.0 - n if self.kappa_ut is None else self.kappa_ut
        lam = self.alpha_ut**2 * (n + kappa) - n
        if not n + lam > 0:
            raise ValueError("invalid UT scaling: n + lambda must be positive")
        wm = np.full(2 * n + 1, 0.5 / (n + lam))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + (1.0 - self.alpha_ut**2 + self.beta_ut)
        return n + lam, wm, wc


@dataclass(frozen=True)
class NavModel:
    """Everything the filter knows about the scene besides its state."""

    chief: ChiefOrbit
    inertia: np.ndarray
    keypoints: KeypointModel
    cam: CameraModel
    stm_mode: str = "j2"
    C_cam_rtn: np.ndarray = field(default_factory=lambda: C_CAM_RTN.copy())

    @property
    def cam_rate(self) -> np.ndarray:
        """Camera-frame inertial angular velocity (camera held fixed in RTN)."""
        return self.C_cam_rtn @ np.array([0.0, 0.0, self.chief.u_rate(self.stm_mode)])

    def scale(self) -> np.ndarray:
        return np.concatenate([np.full(6, self.chief.a), np.ones(6)])


@dataclass
class RelativeState:
    alpha: np.ndarray
    p: np.ndarray
    w: np.ndarray
    q_ref: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    t: float = 0.0

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.p, self.w])

    def with_x(self, x, **kw) -> "RelativeState":
        return replace(self, alpha=x[:6].copy(), p=x[6:9].copy(), w=x[9:].copy(), **kw)

    def copy(self) -> "RelativeState":
        return RelativeState(self.alpha.copy(), self.p.copy(), self.w.copy(), self.q_ref.copy(),
                             self.P.copy(), self.Q.copy(), self.t)


# --------------------------------------------------------------- noise models


def gamma_att(dt: float) -> np.ndarray:
    """Discrete [p, w] noise per unit angular-acceleration PSD.

    White angular acceleration integrated over ``dt``; the angle rows are
    scaled by 1/4 because a small MRP is a quarter of the rotation angle.
    """
    g = np.zeros((N_STATE, N_STATE))
    for i in range(3):
        p, w = 6 + i, 9 + i
        g[p, p] = dt**3 / 3.0 / 16.0
        g[p, w] = g[w, p] = dt**2 / 2.0 / 4.0
        g[w, w] = dt
    return g


_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)


def gamma_orb(chief: ChiefOrbit, t: float, dt: float, mode: str = "kepler") -> np.ndarray:
    """Discrete ROE noise per unit RTN acceleration PSD, integrated through
    the STM over ``[t, t + dt]``."""
    g = np.zeros((N_STATE, N_STATE))
    blk = np.zeros((6, 6))
    for xg, wg in zip(_GL_X, _GL_W):
        tau = 0.5 * dt * (xg + 1.0)
        phi = roe_stm(chief, dt - tau, mode) if dt - tau > 0 else np.eye(6)
        G = phi @ gve_matrix(chief, chief.mean_arg_lat(t + tau, mode))
        blk += 0.5 * dt * wg * (G @ G.T)
    g[:6, :6] = blk
    return g


def process_noise(model: NavModel, t: float, dt: float, q_orb: float, q_att: float) -> np.ndarray:
    return q_orb * gamma_orb(model.chief, t, dt, model.stm_mode) + q_att * gamma_att(dt)


# ------------------------------------------------------------------- helpers


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def psd_floor(P: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues to zero."""
    P = _sym(P)
    vals, vecs = np.linalg.eigh(P)
    if vals.min() >= 0.0:
        return P
    return _sym((vecs * np.clip(vals, 0.0, None)) @ vecs.T)


def sigma_points(x: np.ndarray, P: np.ndarray, ut: UtConfig, scale: np.ndarray):
    """``(2n+1, n)`` sigma points from a lower-triangular square root."""
    c, wm, wc = ut.weights(x.size)
    Ps = _sym(P * np.outer(scale, scale))
    try:
        L = np.linalg.cholesky(c * Ps)
    except np.linalg.LinAlgError:
        Ps = psd_floor(Ps)
        jitter = 1e-12 * max(np.trace(Ps), 1e-30) / x.size
        try:
            L = np.linalg.cholesky(c * (Ps + jitter * np.eye(x.size)))
        except np.linalg.LinAlgError as exc:
            raise CovarianceNotPsd("covariance square root failed") from exc
    L = L / scale[:, None]
    X = np.vstack([x, x + L.T, x - L.T])
    return X, wm, wc


def _attitude_sigma(q_ref: np.ndarray, p: np.ndarray) -> np.ndarray:
    return quat_mul(q_ref[None], mrp_to_quat(p))


def _mrp_about(q_ref: np.ndarray, q: np.ndarray) -> np.ndarray:
    return quat_to_mrp(quat_mul(quat_conj(q_ref)[None], q))


def relative_position_cam(model: NavModel, alpha: np.ndarray, t: float) -> np.ndarray:
    r, _ = roe_to_rtn(alpha, model.chief, t, model.stm_mode)
    return r @ model.C_cam_rtn.T


# --------------------------------------------------------------- time update


def time_update(state: RelativeState, model: NavModel, dt: float, ut: UtConfig = UtConfig()) -> RelativeState:
    """Sigma-point propagation over ``dt`` followed by the USQUE reset.

    ``state.Q`` must already hold the discrete process noise for this step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    scale = model.scale()
    X, wm, wc = sigma_points(state.x, state.P, ut, scale)
    phi = roe_stm(model.chief, dt, model.stm_mode)
    Xn = np.empty_like(X)
    Xn[:, :6] = X[:, :6] @ phi.T
    # beyond pi per step the sampled attitude cannot tell w from an alias
    w_max = float(np.max(np.linalg.norm(X[:, 9:], axis=1)))
    if not w_max * dt < np.pi:
        raise RateAliased(f"sigma-point rate {w_max:.3g} rad/s over dt = {dt:g} s")
    q_sig = _attitude_sigma(state.q_ref, X[:, 6:9])
    q_new, w_new = propagate_attitude_batch(q_sig, X[:, 9:], model.inertia, dt, model.cam_rate)
    q_ref = q_new[0]
    Xn[:, 6:9] = _mrp_about(q_ref, q_new)
    Xn[:, 9:] = w_new
    xm = wm @ Xn
    dX = Xn - xm
    P = (dX * wc[:, None]).T @ dX + state.Q
    q_ref = quat_normalize(quat_mul(q_ref, mrp_to_quat(xm[6:9])))
    xm[6:9] = 0.0
    out = state.with_x(xm, q_ref=q_ref, P=_sym(P), t=state.t + dt)
    return out


# -------------------------------------------------------- measurement update


@dataclass
class MeasurementPrediction:
    y: np.ndarray  # (2K,)
    S: np.ndarray  # (2K, 2K), without R
    C: np.ndarray  # (12, 2K)
    P_prior: np.ndarray


def predict_measurement(state: RelativeState, model: NavModel, roi: Roi,
                        ut: UtConfig = UtConfig()) -> MeasurementPrediction:
    """Unscented prediction of the crop-frame keypoints."""
    X, wm, wc = sigma_points(state.x, state.P, ut, model.scale())
    r_cam = relative_position_cam(model, X[:, :6], state.t)
    q_sig = _attitude_sigma(state.q_ref, X[:, 6:9])
    pts = np.einsum("nij,kj->nki", quat_to_dcm(q_sig), model.keypoints.points) + r_cam[:, None, :]
    if np.any(pts[..., 2] <= 0.0):
        raise BehindCamera("sigma point keypoint behind the camera")
    cam = model.cam
    u = cam.fx * pts[..., 0] / pts[..., 2] + cam.cx
    v = cam.fy * pts[..., 1] / pts[..., 2] + cam.cy
    Y = np.stack([(u - roi.x0) * roi.scale, (v - roi.y0) * roi.scale], axis=-1).reshape(X.shape[0], -1)
    ym = wm @ Y
    dY = Y - ym
    dX = X - wm @ X
    S = _sym((dY * wc[:, None]).T @ dY)
    C = (dX * wc[:, None]).T @ dY
    return MeasurementPrediction(ym, S, C, state.P.copy())


def reject_outliers(meas: KeypointMeasurement, y_pred: np.ndarray, S: np.ndarray,
                    R: np.ndarray | None = None, threshold: float = GATE_THRESHOLD) -> np.ndarray:
    """Per-keypoint squared-Mahalanobis gate; ``True`` means accepted.

    ``R`` is ``(K, 2, 2)`` (defaults to ``meas.cov``). Invalid keypoints are
    never accepted.
    """
    R = meas.cov if R is None else np.asarray(R)
    accepted = np.zeros(meas.K, dtype=bool)
    for k in np.flatnonzero(meas.valid):
        sl = slice(2 * k, 2 * k + 2)
        nu = meas.y[sl] - y_pred[sl]
        M = S[sl, sl] + R[k]
        try:
            d2 = float(nu @ np.linalg.solve(M, nu))
        except np.linalg.LinAlgError:
            continue
        accepted[k] = d2 <= threshold
    return accepted


@dataclass
class UpdateRecord:
    """What ASNC needs from one accepted measurement update."""

    nu: np.ndarray
    S: np.ndarray
    R: np.ndarray
    dx: np.ndarray  # state correction K nu
    P_prior: np.ndarray
    P_post: np.ndarray
    t: float
    q_used: tuple | None = None  # PSDs that built the prior's Q; None means no process noise
    basis: dict = field(default_factory=dict, repr=False)  # dt -> cached normal terms

    def q_sample(self, model: NavModel, dt: float):
        """Covariance-matching sample ``K nu nu^T K^T + P+ - P- + Q_used``
        and its expected spread ``P- - P+ + Q_used``, scaled state units."""
        s = model.scale()
        ss = np.outer(s, s)
        d = self.dx * s
        Q = np.zeros((N_STATE, N_STATE))
        if self.q_used is not None:
            Q = process_noise(model, self.t - dt, dt, *self.q_used)
        sample = np.outer(d, d) + (self.P_post - self.P_prior + Q) * ss
        return sample, (self.P_prior - self.P_post + Q) * ss

    def normal_terms(self, model: NavModel, dt: float):
        """This epoch's weighted contribution to the two-PSD normal equations.

        A rank-one sample has variance of order ``|spread|^2``, so each PSD's
        block is weighted by its inverse; convergence transients then carry
        little weight. The two blocks are disjoint, so the fits decouple.
        """
        if dt not in self.basis:
            ss = np.outer(model.scale(), model.scale())
            A = gamma_orb(model.chief, self.t - dt, dt, model.stm_mode) * ss
            B = gamma_att(dt)
            D, spread = self.q_sample(model, dt)
            nA, nB = np.sum(A * A), np.sum(B * B)
            # the floor stands for a PSD of 1e-75 and only keeps w finite
            w = [1.0 / max(np.sum(spread[blk, blk] ** 2), 1e-150 * n)
                 for blk, n in ((slice(0, 6), nA), (slice(6, 12), nB))]
            N = np.diag([w[0] * nA, w[1] * nB])
            self.basis[dt] = (N, np.array([w[0] * np.sum(A * D), w[1] * np.sum(B * D)]))
        return self.basis[dt]


MIN_KEYPOINTS = 4


def measurement_update(state: RelativeState, meas: KeypointMeasurement, pred: MeasurementPrediction,
                       model: NavModel, accepted: np.ndarray | None = None,
                       min_keypoints: int = MIN_KEYPOINTS):
    """Kalman update with the accepted keypoints.

    Returns ``(state, record)``; ``record`` is ``None`` when the update was
    skipped (too few keypoints or singular innovation covariance).
    """
    if accepted is None:
        accepted = meas.valid.copy()
    keep = np.flatnonzero(accepted & meas.valid)
    if keep.size < min_keypoints:
        return state, None
    rows = np.ravel(np.column_stack([2 * keep, 2 * keep + 1]))
    R = np.zeros((rows.size, rows.size))
    for i, k in enumerate(keep):
        R[2 * i:2 * i + 2, 2 * i:2 * i + 2] = meas.cov[k]
    S = pred.S[np.ix_(rows, rows)]
    Syy = _sym(S + R)
    nu = meas.y[rows] - pred.y[rows]
    try:
        cho = np.linalg.cholesky(Syy)
    except np.linalg.LinAlgError:
        log.warning("singular innovation covariance at t=%.1f; update skipped", state.t)
        return state, None
    C = pred.C[:, rows]
    K = np.linalg.solve(cho.T, np.linalg.solve(cho, C.T)).T
    x = state.x + K @ nu
    ss = np.outer(model.scale(), model.scale())
    P = psd_floor((state.P - K @ Syy @ K.T) * ss) / ss
    q_ref = quat_normalize(quat_mul(state.q_ref, mrp_to_quat(x[6:9])))
    x[6:9] = 0.0
    new = state.with_x(x, q_ref=q_ref, P=P)
    return new, UpdateRecord(nu, S, R, K @ nu, pred.P_prior, P, state.t)


# ----------------------------------------------------------------------- ASNC


@dataclass
class AsncState:
    """Process-noise PSDs and the statistics they are fitted from.

    ``memory`` is the per-epoch forgetting factor of the normal equations;
    ``None`` fits the sliding window of the last ``capacity`` epochs only.
    """

    q_orb: float
    q_att: float
    capacity: int = 30
    min_samples: int = 10
    q_max: tuple = (np.inf, np.inf)
    window: deque = field(default_factory=deque)
    memory: float | None = 0.995
    N: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.window = deque(self.window, maxlen=self.capacity)
        if self.memory is not None and not 0.0 <= self.memory < 1.0:
            raise ValueError("memory must be in [0, 1)")


def asnc_update(asnc: AsncState, record: UpdateRecord | None, model: NavModel, dt: float) -> AsncState:
    """Refit the two process-noise PSDs by covariance matching.

    Each accepted epoch gives a sample ``Q_hat = K nu nu^T K^T + P+ - P- + Q``
    of the discrete process noise; ``Gamma_orb`` and ``Gamma_att`` are fitted
    to the samples by least squares with negative estimates clamped to zero.
    """
    window = deque(asnc.window, maxlen=asnc.capacity)
    N, b = asnc.N.copy(), asnc.b.copy()
    if record is not None:
        window.append(record)
        if asnc.memory is not None:
            Nr, br = record.normal_terms(model, dt)
            N = asnc.memory * N + Nr
            b = asnc.memory * b + br
    new = replace(asnc, window=window, N=N, b=b)
    if len(window) < asnc.min_samples:
        return new
    if asnc.memory is None:
        N, b = np.zeros((2, 2)), np.zeros(2)
        for rec in window:
            Nr, br = rec.normal_terms(model, dt)
            N += Nr
            b += br
    q = _nonneg_lstsq(N, b)
    new.q_orb = float(min(q[0], asnc.q_max[0]))
    new.q_att = float(min(q[1], asnc.q_max[1]))
    return new


def _nonneg_lstsq(N: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimize the quadratic with normal matrix ``N`` over ``q >= 0``."""
    cands = [np.zeros(2)]
    for i in range(2):
        if N[i, i] > 0:
            q = np.zeros(2)
            q[i] = b[i] / N[i, i]
            cands.append(q)
    try:
        cands.append(np.linalg.solve(N, b))
    except np.linalg.LinAlgError:
        pass
    best, best_cost = np.zeros(2), 0.0
    for q in cands:
        if np.all(q >= 0):
            cost = q @ N @ q - 2 * b @ q
            if cost < best_cost:
                best, best_cost = q, cost
    return best


# ------------------------------------------------------------------- outputs


def state_to_pose(state: RelativeState, model: NavModel, ut: UtConfig = UtConfig()):
    """Camera-frame translation, attitude and 6x6 covariance of
    ``[t (m), rotation vector (rad, body axes)]`` via the unscented transform."""
    X, wm, wc = sigma_points(state.x, state.P, ut, model.scale())
    T = relative_position_cam(model, X[:, :6], state.t)
    rv = quat_to_rotvec(mrp_to_quat(X[:, 6:9]))
    Z = np.hstack([T, rv])
    zm = wm @ Z
    dZ = Z - zm
    P_pose = _sym((dZ * wc[:, None]).T @ dZ)
    t_vec = relative_position_cam(model, state.alpha, state.t)
    return t_vec, state.q_ref.copy(), P_pose


def nees(state: RelativeState, model: NavModel, alpha_true, q_true, w_true) -> float:
    """Normalized estimation error squared over the 12-state."""
    p_err = -quat_to_mrp(quat_mul(quat_conj(state.q_ref), q_true))
    e = np.concatenate([state.alpha - alpha_true, state.p + p_err, state.w - w_true])
    s = model.scale()
    es = e * s
    Ps = _sym(state.P * np.outer(s, s))
    return float(es @ np.linalg.solve(Ps, es))


# -------------------------------------------------------------------- driver


@dataclass
class UpdateInfo:
    accepted: np.ndarray
    n_used: int
    updated: bool


class Aukf:
    """Sequential epoch driver: propagate, gate, update, adapt ``Q``."""

    def __init__(self, model: NavModel, state: RelativeState, ut: UtConfig = UtConfig(),
                 asnc: AsncState | None = None, adaptive: bool = True, gate: bool = True):
        self.model = model
        self.state = state
        self.ut = ut
        self.asnc = asnc if asnc is not None else AsncState(1e-12, 1e-10)
        self.adaptive = adaptive
        self.gate = gate
        self.last_dt = None

    def propagate(self, dt: float) -> RelativeState:
        self.state.Q = process_noise(self.model, self.state.t, dt, self.asnc.q_orb, self.asnc.q_att)
        self.state = time_update(self.state, self.model, dt, self.ut)
        self.last_dt = dt
        return self.state

    def predict(self, roi: Roi) -> MeasurementPrediction:
        return predict_measurement(self.state, self.model, roi, self.ut)

    def update(self, meas: KeypointMeasurement, pred: MeasurementPrediction) -> UpdateInfo:
        accepted = reject_outliers(meas, pred.y, pred.S) if self.gate else meas.valid.copy()
        self.state, rec = measurement_update(self.state, meas, pred, self.model, accepted)
        if rec is not None:
            rec.q_used = (self.asnc.q_orb, self.asnc.q_att)
        if self.adaptive and self.last_dt is not None:
            self.asnc = asnc_update(self.asnc, rec, self.model, self.last_dt)
        n_used = int(np.count_nonzero(accepted & meas.valid))
        return UpdateInfo(accepted, n_used, rec is not None)
