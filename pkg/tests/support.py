"""Shared fixtures for the filter tests: a matched-model simulation."""

import numpy as np

from ostnav.aukf import (
    Aukf,
    AsncState,
    NavModel,
    RelativeState,
    nees,
    process_noise,
    relative_position_cam,
)
from ostnav.dynamics import ChiefOrbit, propagate_attitude_batch, roe_stm
from ostnav.geometry import (
    CameraModel,
    default_keypoints,
    mrp_to_quat,
    project,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    roi_from_keypoints,
)
from ostnav.heatmap import KeypointMeasurement, mse_loss
from ostnav.predictor import PredictorParams, backward, forward

CHIEF = ChiefOrbit.from_altitude(700e3)
CAM = CameraModel(2000.0, 2000.0, 960.0, 600.0, 1920, 1200)
INERTIA = np.diag([2.0, 1.8, 1.0])
MODEL = NavModel(CHIEF, INERTIA, default_keypoints(), CAM, "j2")
DT = 5.0
ALPHA0 = np.array([0.0, 20.0, 1.0, 0.0, 1.0, 0.0]) / CHIEF.a
Q0 = quat_from_axis_angle([0.3, 1.0, 0.2], 0.7)
W0 = np.deg2rad([1.5, 0.0, 1.0])


def initial_covariance(pos_m=1.0, att_deg=1.0, rate_dps=0.05, a=CHIEF.a):
    """Handover covariance of an already converged filter."""
    return np.diag(np.r_[np.full(6, pos_m / a) ** 2, np.full(3, np.deg2rad(att_deg) / 4) ** 2,
                         np.full(3, np.deg2rad(rate_dps)) ** 2])


def psd(A, tol=1e-9):
    A = np.asarray(A)
    s = np.outer(MODEL.scale(), MODEL.scale())
    As = A * s
    return np.allclose(As, As.T, rtol=0, atol=1e-12 * max(np.abs(As).max(), 1e-300)) and \
        np.linalg.eigvalsh(0.5 * (As + As.T)).min() >= -tol * max(np.trace(As), 1e-300)


def simulate(seed, n_epochs, q_orb=1e-12, q_att=1e-10, filt_q=None, adaptive=False,
             r_px=2.0, check=None, min_samples=10):
    """Truth with injected process noise, pixel-noise keypoints, one filter.

    Returns per-epoch NEES and the final filter. ``check(filter)`` runs after
    every epoch.
    """
    rng = np.random.default_rng(seed)
    s = MODEL.scale()
    Rk = np.eye(2) * r_px**2
    alpha, q, w = ALPHA0.copy(), Q0.copy(), W0.copy()
    # 0.1 m is already ~0.3 deg of line of sight at 20 m; larger priors make
    # the first update strongly nonlinear and can lock onto an aliased spin
    P0 = initial_covariance(pos_m=0.1)
    e0 = rng.multivariate_normal(np.zeros(12), P0 * np.outer(s, s)) / s
    state = RelativeState(alpha + e0[:6], np.zeros(3), w + e0[9:], quat_mul(q, mrp_to_quat(e0[6:9])),
                          P0.copy(), np.zeros((12, 12)), 0.0)
    fq = (q_orb, q_att) if filt_q is None else filt_q
    f = Aukf(MODEL, state, asnc=AsncState(*fq, min_samples=min_samples), adaptive=adaptive)
    phi = roe_stm(CHIEF, DT, MODEL.stm_mode)
    kp, t, out = MODEL.keypoints, 0.0, []
    for k in range(n_epochs):
        if k > 0:
            Qd = process_noise(MODEL, t, DT, q_orb, q_att)
            alpha = phi @ alpha
            qq, ww = propagate_attitude_batch(q[None], w[None], INERTIA, DT, MODEL.cam_rate)
            eta = rng.multivariate_normal(np.zeros(12), Qd * np.outer(s, s)) / s
            alpha = alpha + eta[:6]
            q = quat_normalize(quat_mul(qq[0], mrp_to_quat(eta[6:9])))
            w = ww[0] + eta[9:]
            t += DT
            f.propagate(DT)
        t_prior = relative_position_cam(MODEL, f.state.alpha, t)
        roi = roi_from_keypoints(project(t_prior, f.state.q_ref, kp, CAM), 1.2, CAM)
        y = roi.to_crop(project(relative_position_cam(MODEL, alpha, t), q, kp, CAM))
        y = y + rng.multivariate_normal(np.zeros(2), Rk, size=kp.K)
        meas = KeypointMeasurement(y.reshape(-1), np.tile(Rk, (kp.K, 1, 1)), np.ones(kp.K, bool))
        f.update(meas, f.predict(roi))
        out.append(nees(f.state, MODEL, alpha, q, w))
        if check is not None:
            check(f)
    return np.array(out), f


def fd_check(params, det, pl, idx, h=1e-5):
    """Relative errors of the analytic gradient on the coordinates ``idx``.

    Central differences; h near eps**(1/3) balances truncation against the
    cancellation error of an O(1) loss.
    """
    g = backward(forward(params, det), pl)
    errs = []
    for i in idx:
        tp, tm = params.theta.copy(), params.theta.copy()
        tp[i] += h
        tm[i] -= h
        lp = mse_loss(forward(PredictorParams(tp, params.dims), det).stack, pl)
        lm = mse_loss(forward(PredictorParams(tm, params.dims), det).stack, pl)
        fd = (lp - lm) / (2 * h)
        errs.append(abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8))
    return np.array(errs)
