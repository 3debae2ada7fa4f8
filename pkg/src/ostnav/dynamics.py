"""Relative orbital and rotational motion.

ROE are the quasi-nonsingular set ``[da, dlambda, dex, dey, dix, diy]`` of
the target relative to the servicer (chief). RTN is the chief's
radial/along-track/orbit-normal frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import quat_normalize

MU_EARTH = 3.986004418e14  # m^3/s^2
R_EARTH = 6378137.0  # m
J2 = 1.08262668e-3

MODES = ("kepler", "j2")


@dataclass(frozen=True)
class ChiefOrbit:
    """Near-circular chief orbit; angles in radians, ``a`` in meters."""

    a: float
    e: float = 0.0
    i: float = np.deg2rad(98.0)
    raan: float = 0.0
    argp: float = 0.0
    M0: float = 0.0

    def __post_init__(self):
        if not self.a > R_EARTH:
            raise ValueError("semi-major axis below Earth radius")
        if not 0.0 <= self.e < 0.1:
            raise ValueError("chief must be near-circular")

    @classmethod
    def from_altitude(cls, altitude: float, **kw) -> "ChiefOrbit":
        return cls(a=R_EARTH + altitude, **kw)

    @property
    def n(self) -> float:
        return float(np.sqrt(MU_EARTH / self.a**3))

    @property
    def period(self) -> float:
        return 2.0 * np.pi / self.n

    @property
    def kappa(self) -> float:
        """J2 secular rate scale ``3/4 J2 (Re/a)^2 n``."""
        return 0.75 * J2 * (R_EARTH / self.a) ** 2 * self.n

    def u_rate(self, mode: str = "kepler") -> float:
        """Mean argument-of-latitude rate."""
        if mode == "kepler":
            return self.n
        c2 = np.cos(self.i) ** 2
        return self.n + self.kappa * ((3 * c2 - 1) + (5 * c2 - 1))

    def mean_arg_lat(self, t: float, mode: str = "kepler") -> float:
        return self.argp + self.M0 + self.u_rate(mode) * t


# ------------------------------------------------------------------------ ROE


@dataclass(frozen=True)
class Roe:
    da: float = 0.0
    dlambda: float = 0.0
    dex: float = 0.0
    dey: float = 0.0
    dix: float = 0.0
    diy: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.da, self.dlambda, self.dex, self.dey, self.dix, self.diy])

    @classmethod
    def from_array(cls, x) -> "Roe":
        return cls(*map(float, x))

    def validate(self, bound: float = 1e-2) -> None:
        if np.any(np.abs(self.as_array()) >= bound):
            raise ValueError("ROE outside the near-range linearization bound")


def roe_stm(chief: ChiefOrbit, dt: float, mode: str = "kepler") -> np.ndarray:
    """6x6 ROE state-transition matrix (near-circular chief)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    phi = np.eye(6)
    phi[1, 0] = -1.5 * chief.n * dt
    if mode == "j2":
        k = chief.kappa
        ci, si = np.cos(chief.i), np.sin(chief.i)
        P = 3 * ci**2 - 1
        Q = 5 * ci**2 - 1
        S = 2 * si * ci
        T = si**2
        phi[1, 0] += -7.0 * k * P * dt
        phi[1, 4] = -7.0 * k * S * dt
        c, s = np.cos(k * Q * dt), np.sin(k * Q * dt)
        phi[2:4, 2:4] = [[c, -s], [s, c]]
        phi[5, 0] = 3.5 * k * S * dt
        phi[5, 4] = 2.0 * k * T * dt
    return phi


def roe_to_rtn_matrix(chief: ChiefOrbit, t: float, mode: str = "kepler") -> np.ndarray:
    """6x6 first-order map from ROE to RTN position/velocity."""
    a, n = chief.a, chief.n
    u = chief.mean_arg_lat(t, mode)
    c, s = np.cos(u), np.sin(u)
    return np.array(
        [
            [a, 0, -a * c, -a * s, 0, 0],
            [0, a, 2 * a * s, -2 * a * c, 0, 0],
            [0, 0, 0, 0, a * s, -a * c],
            [0, 0, a * n * s, -a * n * c, 0, 0],
            [-1.5 * a * n, 0, 2 * a * n * c, 2 * a * n * s, 0, 0],
            [0, 0, 0, 0, a * n * c, a * n * s],
        ]
    )


def roe_to_rtn(alpha, chief: ChiefOrbit, t: float, mode: str = "kepler"):
    """Relative position (m) and velocity (m/s) in the chief RTN frame.

    ``alpha`` may be a :class:`Roe`, a 6-vector or an ``(N, 6)`` batch.
    """
    x = alpha.as_array() if isinstance(alpha, Roe) else np.asarray(alpha, dtype=float)
    rv = x @ roe_to_rtn_matrix(chief, t, mode).T
    return rv[..., :3], rv[..., 3:]


def rtn_to_roe(r, v, chief: ChiefOrbit, t: float, mode: str = "kepler") -> np.ndarray:
    """Inverse of the first-order map."""
    M = roe_to_rtn_matrix(chief, t, mode)
    return np.linalg.solve(M, np.concatenate([r, v]))


def gve_matrix(chief: ChiefOrbit, u: float) -> np.ndarray:
    """d(alpha)/dt per unit RTN acceleration (near-circular Gauss equations)."""
    c, s = np.cos(u), np.sin(u)
    B = np.array(
        [
            [0, 2, 0],
            [-2, 0, 0],
            [s, 2 * c, 0],
            [-c, 2 * s, 0],
            [0, 0, c],
            [0, 0, s],
        ],
        dtype=float,
    )
    return B / (chief.a * chief.n)


# ---------------------------------------------------------------- attitude


@dataclass(frozen=True)
class RelAttitude:
    """Target attitude w.r.t. the camera frame and relative angular velocity
    (rad/s) expressed in the target body frame."""

    q: np.ndarray
    w: np.ndarray


def _cross(a, b):
    # np.cross carries heavy per-call overhead on small arrays
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def _body_from_cam(q, v):
    """Rotate camera-frame vector ``v`` into each body frame: ``R(q)^T v``."""
    w, qv = q[:, 0:1], q[:, 1:]
    # R^T v = v - 2w (qv x v) + 2 qv x (qv x v)
    t = 2.0 * _cross(qv, np.broadcast_to(v, qv.shape))
    return v - w * t + _cross(qv, t)


def _attitude_rhs(q, wa, inertia, inertia_inv, cam_rate):
    # q: (N,4); wa: (N,3) inertial angular velocity in body axes
    wr = wa - _body_from_cam(q, cam_rate)
    w0, x0, y0, z0 = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    a, b, c = wr[:, 0], wr[:, 1], wr[:, 2]
    qdot = 0.5 * np.stack(
        [
            -x0 * a - y0 * b - z0 * c,
            w0 * a + y0 * c - z0 * b,
            w0 * b - x0 * c + z0 * a,
            w0 * c + x0 * b - y0 * a,
        ],
        axis=1,
    )
    wdot = -_cross(wa, wa @ inertia.T) @ inertia_inv.T
    return qdot, wdot


def substeps_for(w_abs: np.ndarray, dt: float, max_step: float = 1.0,
                 max_angle: float = 0.02) -> int:
    """Number of RK4 substeps so each one is at most ``max_step`` seconds
    and rotates at most ``max_angle`` radians."""
    wmax = float(np.max(np.linalg.norm(np.atleast_2d(w_abs), axis=-1)))
    return max(int(np.ceil(dt / max_step)), int(np.ceil(wmax * dt / max_angle)), 1)


@njit(cache=True)
def _rk4_attitude(q, wa, inertia, inertia_inv, cam_rate, h, n_sub):
    n = q.shape[0]
    qo = q.copy()
    wo = wa.copy()
    ks_q = np.empty((4, 4))
    ks_w = np.empty((4, 3))
    qs = np.empty(4)
    ws = np.empty(3)
    for s in range(n):
        qc = qo[s].copy()
        wc = wo[s].copy()
        for _ in range(n_sub):
            for stage in range(4):
                if stage == 0:
                    fac = 0.0
                elif stage == 3:
                    fac = h
                else:
                    fac = 0.5 * h
                for i in range(4):
                    qs[i] = qc[i] + (fac * ks_q[stage - 1, i] if stage > 0 else 0.0)
                for i in range(3):
                    ws[i] = wc[i] + (fac * ks_w[stage - 1, i] if stage > 0 else 0.0)
                qw, qx, qy, qz = qs[0], qs[1], qs[2], qs[3]
                # camera rate in body axes: R(q)^T c
                cx, cy, cz = cam_rate[0], cam_rate[1], cam_rate[2]
                tx = 2.0 * (qy * cz - qz * cy)
                ty = 2.0 * (qz * cx - qx * cz)
                tz = 2.0 * (qx * cy - qy * cx)
                bx = cx - qw * tx + (qy * tz - qz * ty)
                by = cy - qw * ty + (qz * tx - qx * tz)
                bz = cz - qw * tz + (qx * ty - qy * tx)
                a = ws[0] - bx
                b = ws[1] - by
                c = ws[2] - bz
                ks_q[stage, 0] = 0.5 * (-qx * a - qy * b - qz * c)
                ks_q[stage, 1] = 0.5 * (qw * a + qy * c - qz * b)
                ks_q[stage, 2] = 0.5 * (qw * b - qx * c + qz * a)
                ks_q[stage, 3] = 0.5 * (qw * c + qx * b - qy * a)
                Ix = inertia[0, 0] * ws[0] + inertia[0, 1] * ws[1] + inertia[0, 2] * ws[2]
                Iy = inertia[1, 0] * ws[0] + inertia[1, 1] * ws[1] + inertia[1, 2] * ws[2]
                Iz = inertia[2, 0] * ws[0] + inertia[2, 1] * ws[1] + inertia[2, 2] * ws[2]
                mx = -(ws[1] * Iz - ws[2] * Iy)
                my = -(ws[2] * Ix - ws[0] * Iz)
                mz = -(ws[0] * Iy - ws[1] * Ix)
                for i in range(3):
                    ks_w[stage, i] = inertia_inv[i, 0] * mx + inertia_inv[i, 1] * my + inertia_inv[i, 2] * mz
            nrm = 0.0
            for i in range(4):
                qc[i] += h / 6.0 * (ks_q[0, i] + 2.0 * ks_q[1, i] + 2.0 * ks_q[2, i] + ks_q[3, i])
                nrm += qc[i] * qc[i]
            nrm = np.sqrt(nrm)
            for i in range(4):
                qc[i] /= nrm
            for i in range(3):
                wc[i] += h / 6.0 * (ks_w[0, i] + 2.0 * ks_w[1, i] + 2.0 * ks_w[2, i] + ks_w[3, i])
        qo[s] = qc
        wo[s] = wc
    return qo, wo


def propagate_attitude_batch(q, w, inertia, dt: float, cam_rate=None,
                             n_sub: int | None = None, jit: bool = True):
    """RK4 torque-free propagation of ``(N, 4)`` quaternions and ``(N, 3)``
    relative rates. ``cam_rate`` is the camera frame's constant inertial
    angular velocity in camera axes (``None`` for an inertial camera).

    ``jit=False`` runs the equivalent pure-numpy integrator.
    """
    q = quat_normalize(np.atleast_2d(q))
    w = np.atleast_2d(np.asarray(w, dtype=float))
    inertia = np.asarray(inertia, dtype=float)
    inv = np.linalg.inv(inertia)
    cr = np.zeros(3) if cam_rate is None else np.asarray(cam_rate, dtype=float)
    wa = w + _body_from_cam(q, cr)
    if n_sub is None:
        n_sub = substeps_for(wa, dt)
    h = dt / n_sub
    if jit:
        q, wa = _rk4_attitude(np.ascontiguousarray(q), np.ascontiguousarray(wa), inertia, inv, cr, h, n_sub)
    else:
        for _ in range(n_sub):
            k1q, k1w = _attitude_rhs(q, wa, inertia, inv, cr)
            k2q, k2w = _attitude_rhs(q + 0.5 * h * k1q, wa + 0.5 * h * k1w, inertia, inv, cr)
            k3q, k3w = _attitude_rhs(q + 0.5 * h * k2q, wa + 0.5 * h * k2w, inertia, inv, cr)
            k4q, k4w = _attitude_rhs(q + h * k3q, wa + h * k3w, inertia, inv, cr)
            q = quat_normalize(q + h / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q))
            wa = wa + h / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
    return q, wa - _body_from_cam(q, cr)


def propagate_attitude(att: RelAttitude, inertia, dt: float, cam_rate=None) -> RelAttitude:
    if dt <= 0:
        raise ValueError("dt must be positive")
    q, w = propagate_attitude_batch(att.q[None], att.w[None], inertia, dt, cam_rate)
    return RelAttitude(q[0], w[0])


def kinetic_energy(w_abs, inertia) -> float:
    return 0.5 * float(w_abs @ np.asarray(inertia) @ w_abs)


def angular_momentum_norm(w_abs, inertia) -> float:
    return float(np.linalg.norm(np.asarray(inertia) @ w_abs))


# ------------------------------------------------------------------ oracle


def _gravity(r: np.ndarray, mode: str) -> np.ndarray:
    rn = np.linalg.norm(r)
    acc = -MU_EARTH * r / rn**3
    if mode == "j2":
        x, y, z = r
        k = 1.5 * J2 * MU_EARTH * R_EARTH**2 / rn**5
        f = 5.0 * z * z / (rn * rn)
        acc = acc + k * np.array([x * (f - 1), y * (f - 1), z * (f - 3)])
    return acc


def chief_eci(chief: ChiefOrbit, t: float = 0.0):
    """Osculating chief position/velocity in ECI from its elements at ``t``
    (two-body mean anomaly advance)."""
    M = chief.M0 + chief.n * t
    E = M
    for _ in range(30):
        E = E - (E - chief.e * np.sin(E) - M) / (1 - chief.e * np.cos(E))
    nu = 2 * np.arctan2(np.sqrt(1 + chief.e) * np.sin(E / 2), np.sqrt(1 - chief.e) * np.cos(E / 2))
    p = chief.a * (1 - chief.e**2)
    rmag = p / (1 + chief.e * np.cos(nu))
    r_pf = rmag * np.array([np.cos(nu), np.sin(nu), 0.0])
    v_pf = np.sqrt(MU_EARTH / p) * np.array([-np.sin(nu), chief.e + np.cos(nu), 0.0])
    cO, sO = np.cos(chief.raan), np.sin(chief.raan)
    ci, si = np.cos(chief.i), np.sin(chief.i)
    cw, sw = np.cos(chief.argp), np.sin(chief.argp)
    R = np.array(
        [
            [cO * cw - sO * sw * ci, -cO * sw - sO * cw * ci, sO * si],
            [sO * cw + cO * sw * ci, -sO * sw + cO * cw * ci, -cO * si],
            [sw * si, cw * si, ci],
        ]
    )
    return R @ r_pf, R @ v_pf


def rtn_frame(rc: np.ndarray, vc: np.ndarray):
    """Rows are the R, T, N unit vectors in ECI; also returns the frame rate."""
    h = np.cross(rc, vc)
    R_hat = rc / np.linalg.norm(rc)
    N_hat = h / np.linalg.norm(h)
    T_hat = np.cross(N_hat, R_hat)
    omega = h / np.dot(rc, rc)
    return np.vstack([R_hat, T_hat, N_hat]), omega


def _oracle_rhs(x: np.ndarray, mode: str) -> np.ndarray:
    rc, vc, dr, dv = x[:3], x[3:6], x[6:9], x[9:12]
    gc = _gravity(rc, mode)
    gd = _gravity(rc + dr, mode)
    return np.concatenate([vc, gc, dv, gd - gc])


def oracle_propagate_rtn(r, v, chief: ChiefOrbit, dt: float, mode: str = "kepler",
                         t0: float = 0.0, max_step: float = 1.0, chief_state=None):
    """Propagate relative RTN position/velocity with RK4 on the full
    nonlinear two-body (optionally J2) equations for chief and target.

    Returns ``(r, v, chief_state)``; pass ``chief_state`` back in to chain
    calls without re-deriving the chief from its elements.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rc, vc = chief_eci(chief, t0) if chief_state is None else chief_state
    C, omega = rtn_frame(rc, vc)
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    dr = C.T @ r
    dv = C.T @ v + np.cross(omega, dr)
    x = np.concatenate([rc, vc, dr, dv])
    n = max(int(np.ceil(dt / max_step)), 1)
    h = dt / n
    for _ in range(n):
        k1 = _oracle_rhs(x, mode)
        k2 = _oracle_rhs(x + 0.5 * h * k1, mode)
        k3 = _oracle_rhs(x + 0.5 * h * k2, mode)
        k4 = _oracle_rhs(x + h * k3, mode)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    rc, vc, dr, dv = x[:3], x[3:6], x[6:9], x[9:12]
    C, omega = rtn_frame(rc, vc)
    r_out = C @ dr
    v_out = C @ (dv - np.cross(omega, dr))
    return r_out, v_out, (rc, vc)
