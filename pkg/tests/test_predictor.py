import numpy as np
import pytest

from support import fd_check
from ostnav.geometry import default_keypoints
from ostnav.heatmap import crop_per_heatmap, decode_peak, measure, mse_loss, render_blobs
from ostnav.predictor import (
    GapModel,
    PredictorParams,
    backward,
    bias_field,
    detect,
    forward,
    init_params,
    load_params,
    optimizer_step,
    param_count,
    save_params,
)

K = 11
S = crop_per_heatmap()
VIEW = np.array([0.3, -0.5, 0.81])
CLEAN = GapModel(0.0, 3.0, 0.0, 0.0, 0.0, 1.0)


def truth(rng):
    return rng.uniform(40, 215, size=(K, 2))


def pl_for(px):
    return render_blobs(np.asarray(px).reshape(-1, 2) / S)


def test_zero_gap_blobs_at_truth(rng):
    px = truth(rng)
    det = detect(px, VIEW, GapModel.zero(), rng)
    assert np.abs(det - pl_for(px)).max() == 0.0


def test_bias_field_offset(rng):
    px = truth(rng)
    gap = GapModel(3.0, 3.0, 0.0, 0.0, 0.0, 1.0)
    m = measure(detect(px, VIEW, gap, rng))
    b = bias_field(VIEW, gap, K)
    assert np.abs(m.points - px - b).max() < 0.05 * S
    assert np.abs(b).max() <= 3.0


def test_outlier_rate(rng):
    gap = GapModel(0.0, 3.0, 1.0, 0.1, 30.0, 1.0)
    moved = 0
    for _ in range(1000 // K + 1):
        px = truth(rng)
        m = measure(detect(px, VIEW, gap, rng))
        moved += int(np.sum(np.linalg.norm(m.points - px, axis=1) > 3 * np.sqrt(2) * gap.noise_sigma))
    n = K * (1000 // K + 1)
    assert moved / n == pytest.approx(0.1, abs=0.02)


def test_gap_validation():
    with pytest.raises(ValueError):
        GapModel(bias_amp=-1.0)
    with pytest.raises(ValueError):
        GapModel(outlier_prob=0.6)
    with pytest.raises(ValueError):
        GapModel(blob_sigma_inflation=0.9)
    g = GapModel().scaled(2.0)
    assert g.bias_amp == 8.0 and g.blob_sigma_inflation == 2.0


def test_detect_deterministic():
    px = truth(np.random.default_rng(3))
    a = detect(px, VIEW, GapModel(), np.random.default_rng(9))
    b = detect(px, VIEW, GapModel(), np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_residual_start_is_identity(rng):
    px = truth(rng)
    det = detect(px, VIEW, GapModel(), rng)
    out = forward(init_params(K), det)
    assert np.array_equal(out.coords, measure(det).y)
    assert np.array_equal(out.measurement().cov, measure(det).cov)


def test_param_count_stable():
    p = init_params(K)
    assert p.P == param_count((22, 64, 64, 22)) == 22 * 64 + 64 + 64 * 64 + 64 + 64 * 22 + 22


def test_output_peaks_at_coords(rng):
    p = init_params(K, zero_output=False, seed=1)
    out = forward(p, detect(truth(rng), VIEW, CLEAN, rng))
    for k in range(K):
        loc, _ = decode_peak(out.stack[k])
        assert np.abs(loc * S - out.coords[2 * k:2 * k + 2]).max() < 0.05 * S


def test_invalid_keypoint_passes_through(rng):
    det = detect(truth(rng), VIEW, CLEAN, rng)
    det[4] = 0.0
    out = forward(init_params(K, zero_output=False), det)
    assert not out.valid[4] and np.isnan(out.coords[8:10]).all()
    assert np.array_equal(out.stack[4], det[4])


def test_grad_zero_at_minimum(rng):
    p = init_params(K, zero_output=False, seed=2)
    out = forward(p, detect(truth(rng), VIEW, CLEAN, rng))
    assert np.abs(backward(out, out.stack)).max() < 1e-12


def test_gradient_matches_finite_differences(rng):
    p = init_params(K, zero_output=False, seed=4)
    px = truth(rng)
    det = detect(px, VIEW, GapModel(4.0, 3.0, 1.0, 0.0, 0.0, 1.5), rng)
    errs = fd_check(p, det, pl_for(px), rng.choice(p.P, 50, replace=False))
    assert errs.max() < 1e-5


def test_descent_property(rng):
    p = init_params(K, zero_output=False, seed=5)
    px = truth(rng)
    det = detect(px, VIEW, GapModel(4.0, 3.0, 0.0, 0.0, 0.0, 1.0), rng)
    pl = pl_for(px)
    out = forward(p, det)
    l0, g = mse_loss(out.stack, pl), backward(out, pl)
    for step in (1e-3, 1e-4, 1e-5):
        q = PredictorParams(p.theta - step * g / np.linalg.norm(g), p.dims)
        assert mse_loss(forward(q, det).stack, pl) < l0


def test_overfit_constant_bias(rng):
    px = truth(rng)
    gap = GapModel(4.0, 3.0, 0.0, 0.0, 0.0, 1.0)
    det = detect(px, VIEW, gap, rng)
    pl = pl_for(px)
    p = init_params(K)
    for _ in range(500):
        p = optimizer_step(p, backward(forward(p, det), pl), 1e-3, 0.0)
    corr = forward(p, det).coords.reshape(-1, 2) - measure(det).points
    assert np.abs(corr + bias_field(VIEW, gap, K)).max() < 0.5


def test_adamw_zero_grad_no_decay():
    p = init_params(K, zero_output=False)
    q = optimizer_step(p, np.zeros(p.P), 1e-3, 0.0)
    assert np.array_equal(q.theta, p.theta) and q.step == 1


def test_adamw_first_step_is_sign(rng):
    p = init_params(K, zero_output=False)
    g = rng.normal(size=p.P)
    q = optimizer_step(p, g, 1e-3, 0.0)
    assert np.allclose(q.theta - p.theta, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-18)
    assert np.abs(q.theta - p.theta + 1e-3 * np.sign(g)).max() <= 1e-3 * (1e-8 / np.abs(g).min()) + 1e-15


def test_adamw_decoupled_decay():
    p = init_params(K, zero_output=False)
    q = p
    for _ in range(3):
        q = optimizer_step(q, np.zeros(p.P), 1e-2, 0.1)
    assert np.allclose(q.theta, p.theta * (1 - 1e-3) ** 3, rtol=1e-14, atol=0)


def test_adamw_rejects_nonfinite():
    p = init_params(K)
    g = np.zeros(p.P)
    g[0] = np.nan
    with pytest.raises(AssertionError):
        optimizer_step(p, g, 1e-3, 0.0)


def test_params_validate_size():
    with pytest.raises(ValueError):
        PredictorParams(np.zeros(5), (22, 64, 64, 22))


def test_checkpoint_round_trip(tmp_path, rng):
    p = init_params(K, zero_output=False, seed=3)
    p = optimizer_step(p, rng.normal(size=p.P), 1e-3, 0.1)
    save_params(tmp_path / "p.bin", p)
    q = load_params(tmp_path / "p.bin")
    assert q.dims == p.dims and q.step == 1
    assert all(np.array_equal(a, b) for a, b in ((q.theta, p.theta), (q.m, p.m), (q.v, p.v)))
    (tmp_path / "bad.bin").write_bytes((tmp_path / "p.bin").read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.bin")


def test_forward_deterministic(rng):
    p = init_params(K, zero_output=False, seed=8)
    det = detect(truth(rng), VIEW, GapModel(), rng)
    a, b = forward(p, det), forward(p, det)
    assert np.array_equal(a.stack, b.stack) and np.array_equal(a.coords, b.coords)


def test_keypoints_model_size_matches():
    assert default_keypoints().K == K
