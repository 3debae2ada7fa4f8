import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_quat
from ostnav.geometry import (
    CameraModel,
    KeypointModel,
    default_keypoints,
    project,
    quat_from_axis_angle,
    quat_mul,
    quat_to_dcm,
    dcm_to_quat,
    roi_from_keypoints,
)
from ostnav.heatmap import KeypointMeasurement
from ostnav.pose import (
    Q_ZERO_DEG,
    T_ZERO_RATIO,
    DegenerateGeometry,
    ErrorReport,
    InsufficientSpan,
    Pose,
    TooFewPoints,
    pose_errors,
    reprojection_rms,
    rotation_error_deg,
    solve_pnp,
    steady_state_errors,
)

CAM = CameraModel(2000.0, 2000.0, 960.0, 600.0, 1920, 1200)
KP = default_keypoints()


def random_pose(rng):
    t = np.r_[rng.uniform(-1, 1, 2), rng.uniform(6, 40)]
    return Pose(t, random_quat(rng))


def exact_meas(pose, model=KP, valid=None):
    uv = project(pose.t, pose.q, model, CAM)
    valid = np.ones(model.K, bool) if valid is None else valid
    return KeypointMeasurement(uv.reshape(-1), np.tile(np.eye(2), (model.K, 1, 1)), valid), uv


def test_pnp_noise_free_round_trip(rng):
    worst_q = worst_px = 0.0
    for _ in range(100):
        truth = random_pose(rng)
        meas, uv = exact_meas(truth)
        est = solve_pnp(meas, KP, CAM)
        worst_q = max(worst_q, rotation_error_deg(est.q, truth.q))
        worst_px = max(worst_px, reprojection_rms(est, KP, CAM, uv))
    assert worst_q < 1e-5 and worst_px < 1e-6


def test_pnp_in_crop_frame(rng):
    truth = random_pose(rng)
    uv = project(truth.t, truth.q, KP, CAM)
    roi = roi_from_keypoints(uv, 1.2, CAM)
    meas = KeypointMeasurement(roi.to_crop(uv).reshape(-1), np.tile(np.eye(2), (KP.K, 1, 1)), np.ones(KP.K, bool))
    est = solve_pnp(meas, KP, CAM, roi)
    assert rotation_error_deg(est.q, truth.q) < 1e-5 and np.abs(est.t - truth.t).max() < 1e-6


def test_pnp_planar_square_picks_the_right_solution():
    sq = KeypointModel(np.array([[-1.0, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]]))
    for ang in (0.2, 0.6, 1.0):
        truth = Pose([0.3, -0.2, 12.0], quat_from_axis_angle([1, 0.5, 0], ang))
        meas, uv = exact_meas(truth, sq)
        est = solve_pnp(meas, sq, CAM)
        # brute force: the mirrored pose of a planar target also has positive
        # depth but a worse residual
        assert est.t[2] > 0
        assert rotation_error_deg(est.q, truth.q) < 1e-5
        assert reprojection_rms(est, sq, CAM, uv) < 1e-6


def test_pnp_ignores_invalid_keypoints(rng):
    truth = random_pose(rng)
    valid = np.ones(KP.K, bool)
    valid[[1, 5, 7]] = False
    meas, _ = exact_meas(truth, valid=valid)
    meas.y[2:4] += 500.0  # garbage on an invalid point
    est = solve_pnp(meas, KP, CAM)
    assert rotation_error_deg(est.q, truth.q) < 1e-5


def test_pnp_too_few_points(rng):
    valid = np.zeros(KP.K, bool)
    valid[:3] = True
    meas, _ = exact_meas(random_pose(rng), valid=valid)
    with pytest.raises(TooFewPoints):
        solve_pnp(meas, KP, CAM)


def test_pnp_degenerate_subset():
    line = KeypointModel(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0.0], [0, 1, 1]]))
    valid = np.array([True, True, True, True, False])
    meas, _ = exact_meas(Pose([0, 0, 10.0], [1, 0, 0, 0]), line, valid)
    with pytest.raises(DegenerateGeometry):
        solve_pnp(meas, line, CAM)


def test_pnp_camera_rotation_equivariance(rng):
    # rotating the camera about its center rotates the recovered pose the same way
    for _ in range(10):
        truth = random_pose(rng)
        Rc = quat_to_dcm(quat_from_axis_angle(rng.normal(size=3), 0.05))
        moved = Pose(Rc @ truth.t, quat_mul(dcm_to_quat(Rc), truth.q))
        a = solve_pnp(exact_meas(truth)[0], KP, CAM)
        b = solve_pnp(exact_meas(moved)[0], KP, CAM)
        assert np.abs(b.t - Rc @ a.t).max() < 1e-6
        assert rotation_error_deg(b.q, quat_mul(dcm_to_quat(Rc), a.q)) < 1e-5


def test_pnp_noise_degrades_gracefully(rng):
    truth = Pose([0.2, 0.1, 15.0], quat_from_axis_angle([0, 1, 0], 0.4))
    meas, _ = exact_meas(truth)
    meas.y += rng.normal(size=meas.y.size) * 1.0
    est = solve_pnp(meas, KP, CAM)
    assert rotation_error_deg(est.q, truth.q) < 1.0 and np.linalg.norm(est.t - truth.t) < 0.2


# -------------------------------------------------------------------- metrics


def test_errors_zero_at_truth():
    p = Pose([1.0, 2.0, 10.0], quat_from_axis_angle([0, 0, 1], 0.3))
    assert pose_errors(p, p) == ErrorReport(0.0, 0.0, 0.0, 0.0)


def test_double_cover(rng):
    q = random_quat(rng)
    assert rotation_error_deg(q, -q) == 0.0
    p = Pose([0, 0, 10.0], q)
    assert pose_errors(Pose([0, 0, 10.0], -q), p).e_q == 0.0


def test_rotation_error_known_angle():
    q = quat_from_axis_angle([0, 0, 1], np.deg2rad(30.0))
    assert rotation_error_deg(q, [1.0, 0, 0, 0]) == pytest.approx(30.0, abs=1e-12)
    assert rotation_error_deg(quat_from_axis_angle([1, 0, 0], np.pi), [1.0, 0, 0, 0]) == pytest.approx(180.0)


def test_calibrated_translation_example():
    truth = Pose([0, 0, 10.0], [1, 0, 0, 0])
    r = pose_errors(Pose([0, 0.02, 10.0], [1, 0, 0, 0]), truth)
    assert r.e_t == pytest.approx(0.02) and r.e_t_calibrated == 0.0


def test_calibration_boundaries():
    assert T_ZERO_RATIO == 2.173e-3 and Q_ZERO_DEG == 0.169
    truth = Pose([0, 0, 100.0], [1, 0, 0, 0])
    below = pose_errors(Pose([0, 0, 100.0 + 0.2172], [1, 0, 0, 0]), truth)
    above = pose_errors(Pose([0, 0, 100.0 + 0.2174], [1, 0, 0, 0]), truth)
    assert below.e_t_calibrated == 0.0 and above.e_t_calibrated == above.e_t > 0
    qb = quat_from_axis_angle([0, 1, 0], np.deg2rad(0.1689))
    qa = quat_from_axis_angle([0, 1, 0], np.deg2rad(0.1691))
    assert pose_errors(Pose(truth.t, qb), truth).e_q_calibrated == 0.0
    r = pose_errors(Pose(truth.t, qa), truth)
    assert r.e_q_calibrated == r.e_q > Q_ZERO_DEG


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 3.1))
def test_calibrated_never_exceeds_raw(dx, dz, ang):
    truth = Pose([0.1, 0, 10.0], [1, 0, 0, 0])
    r = pose_errors(Pose([0.1 + dx, 0, 10.0 + dz], quat_from_axis_angle([1, 1, 0], ang)), truth)
    assert 0 <= r.e_t_calibrated <= r.e_t and 0 <= r.e_q_calibrated <= r.e_q <= 180.0


def test_translation_error_rotation_invariant(rng):
    a, b = random_pose(rng), random_pose(rng)
    R = quat_to_dcm(random_quat(rng))
    ra, rb = Pose(R @ a.t, a.q), Pose(R @ b.t, b.q)
    assert pose_errors(ra, rb).e_t == pytest.approx(pose_errors(a, b).e_t, rel=1e-12)


# ------------------------------------------------------------ steady state


def reports(vals):
    return [ErrorReport(v, 10 * v, v, 10 * v) for v in vals]


def test_steady_state_constant():
    T = 5926.38
    times = np.arange(2371) * 5.0
    et, eq = steady_state_errors(reports(np.full(times.size, 0.7)), times, T)
    assert et == pytest.approx(0.7) and eq == pytest.approx(7.0)


def test_steady_state_window():
    T = 5926.38
    times = np.arange(2371) * 5.0
    vals = np.where(times < T, 1.0, 0.2)
    assert steady_state_errors(reports(vals), times, T)[0] == pytest.approx(0.2)
    sel = np.flatnonzero((times >= T) & (times <= 2 * T))
    assert (sel[0], sel[-1]) == (1186, 2370)


def test_steady_state_paper_figures():
    from ostnav.dynamics import ChiefOrbit

    T = ChiefOrbit.from_altitude(700e3).period
    assert 2 * T / 5.0 == pytest.approx(2371, abs=1)
    times = np.arange(2371) * 5.0
    steady_state_errors(reports(np.ones(2371)), times, T)


def test_steady_state_too_short():
    times = np.arange(2000) * 5.0
    with pytest.raises(InsufficientSpan):
        steady_state_errors(reports(np.ones(2000)), times, 5926.38)
    with pytest.raises(InsufficientSpan):
        steady_state_errors(reports([1.0]), [0.0], 5926.38)
