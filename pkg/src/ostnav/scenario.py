"""End-to-end rendezvous simulation: truth, detector, predictor, filter, OST.

Two trajectory families are provided. ``roe1`` holds a constant along-track
separation while the target spins slowly about one principal axis. ``roe2``
spirals in from about 32 m to 16 m on a passively safe e/i-vector ellipse
while the target tumbles about two axes. Both are scaled-down stand-ins for
the lightbox trajectories, not copies of them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .aukf import (
    AsncState,
    Aukf,
    FilterDiverged,
    NavModel,
    RelativeState,
    UtConfig,
    nees,
    relative_position_cam,
    state_to_pose,
)
from .dynamics import (
    ChiefOrbit,
    chief_eci,
    oracle_propagate_rtn,
    propagate_attitude_batch,
    roe_stm,
    roe_to_rtn,
    rtn_to_roe,
)
from .geometry import (
    BehindCamera,
    CameraModel,
    KeypointModel,
    dcm_to_quat,
    default_keypoints,
    mrp_to_quat,
    quat_mul,
    quat_normalize,
    quat_to_dcm,
    project,
    roi_from_keypoints,
)
from .ost import OstConfig, ViewTrigger, make_pseudo_labels, ost_step, schedule
from .pose import DegenerateGeometry, ErrorReport, InsufficientSpan, Pose, TooFewPoints, pose_errors, solve_pnp, steady_state_errors
from .predictor import GapModel, PredictorParams, detect, forward, init_params

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

LOG_DIR_ENV = "OSTNAV_LOG_DIR"
TRAJECTORIES = ("roe1", "roe2")
TRUTH_MODES = ("stm", "oracle")


class ConfigError(ValueError):
    pass


# -------------------------------------------------------------------- config


@dataclass(frozen=True)
class OrbitConfig:
    altitude: float = 700e3
    inclination_deg: float = 98.0
    raan_deg: float = 0.0
    argp_deg: float = 0.0
    mean_anomaly_deg: float = 0.0

    def chief(self) -> ChiefOrbit:
        return ChiefOrbit.from_altitude(
            self.altitude, i=math.radians(self.inclination_deg), raan=math.radians(self.raan_deg),
            argp=math.radians(self.argp_deg), M0=math.radians(self.mean_anomaly_deg))


@dataclass(frozen=True)
class TruthConfig:
    """Initial truth. ``None`` fields take the trajectory preset."""

    roe_m: tuple | None = None  # a * [da, dlambda, dex, dey, dix, diy]
    q0: tuple | None = None
    w0_dps: tuple | None = None  # relative angular velocity, body axes


@dataclass(frozen=True)
class FilterConfig:
    sigma_roe_m: float = 1.0
    sigma_att_deg: float = 5.0
    sigma_rate_dps: float = 0.5
    q_orb: float = 1e-12
    q_att: float = 1e-10
    adaptive: bool = True
    gate: bool = True
    asnc_window: int = 30
    roi_margin: float = 1.2
    roe_guess_m: tuple | None = None  # explicit initial estimate, else drawn from P0
    q_guess: tuple | None = None
    w_guess_dps: tuple | None = None


@dataclass(frozen=True)
class PredictorConfig:
    hidden: int = 64
    out_scale: float = 4.0
    init_seed: int = 0


SPEED_CAMERA = dict(fx=2988.58, fy=2988.34, cx=960.0, cy=600.0, width=1920, height=1200)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "roe2"
    trajectory: str = "roe2"
    seed: int = 0
    duration_orbits: float = 2.0
    cadence: float = 5.0
    truth_mode: str = "stm"
    stm_mode: str = "j2"
    inertia: tuple = ((2.0, 0.0, 0.0), (0.0, 1.8, 0.0), (0.0, 0.0, 1.0))
    keypoints: str | None = None  # JSON path; None -> built-in model
    orbit: OrbitConfig = field(default_factory=OrbitConfig)
    camera: dict = field(default_factory=lambda: dict(SPEED_CAMERA))
    truth: TruthConfig = field(default_factory=TruthConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    ut: UtConfig = field(default_factory=UtConfig)
    gap: GapModel = field(default_factory=GapModel)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    ost: OstConfig = field(default_factory=OstConfig)
    base_dir: str = "."

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ConfigError(f"trajectory must be one of {TRAJECTORIES}")
        if self.truth_mode not in TRUTH_MODES:
            raise ConfigError(f"truth_mode must be one of {TRUTH_MODES}")
        if not (self.cadence > 0 and self.duration_orbits > 0):
            raise ConfigError("cadence and duration must be positive")
        if self.keypoints is not None and not self.keypoint_path().exists():
            raise ConfigError(f"keypoint file not found: {self.keypoint_path()}")

    def keypoint_path(self) -> Path:
        p = Path(self.keypoints)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def keypoint_model(self) -> KeypointModel:
        return default_keypoints() if self.keypoints is None else KeypointModel.from_json(self.keypoint_path())

    def camera_model(self) -> CameraModel:
        return CameraModel(**self.camera)

    def nav_model(self) -> NavModel:
        return NavModel(self.orbit.chief(), np.array(self.inertia, dtype=float), self.keypoint_model(),
                        self.camera_model(), self.stm_mode)

    def n_epochs(self) -> int:
        span = self.duration_orbits * self.orbit.chief().period
        return int(math.floor(span / self.cadence + 1e-9)) + 1

    def with_overrides(self, seed=None, ost=None) -> "ScenarioConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if ost is not None:
            cfg = replace(cfg, ost=replace(cfg.ost, enabled=bool(ost)))
        return cfg

    def to_dict(self) -> dict:
        return _plain(asdict(self))


_SECTIONS = dict(orbit=OrbitConfig, truth=TruthConfig, filter=FilterConfig, ut=UtConfig,
                 gap=GapModel, predictor=PredictorConfig, ost=OstConfig)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(data: dict, base_dir: str = ".") -> ScenarioConfig:
    data = dict(data)
    kw = {"base_dir": base_dir}
    for key, cls in _SECTIONS.items():
        if key in data:
            sec = data.pop(key)
            if not isinstance(sec, dict):
                raise ConfigError(f"[{key}] must be a table")
            kw[key] = _build(cls, sec, key)
    if "camera" in data:
        cam = dict(SPEED_CAMERA)
        cam.update(data.pop("camera"))
        kw["camera"] = cam
    names = {f.name for f in fields(ScenarioConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw.update({k: _tuplify(v) for k, v in data.items()})
    try:
        cfg = ScenarioConfig(**kw)
        cfg.camera_model()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ScenarioConfig:
    """Read a TOML (or ``.json``) scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data, base_dir=str(path.parent))


# ---------------------------------------------------------------------- truth


def _q_body_x_to_cam_minus_y() -> np.ndarray:
    # body x along the orbit normal (camera -y), body z along camera +x
    R = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return dcm_to_quat(R)


PRESETS = {
    "roe1": dict(
        roe_m=(0.0, 15.0, 0.3, 0.0, 0.3, 0.0),
        q0=tuple(_q_body_x_to_cam_minus_y()),
        w0_dps=(0.02, 0.0, 0.0),
    ),
    "roe2": dict(
        roe_m=(0.85, 32.0, 1.5, 0.0, 1.5, 0.0),
        q0=tuple(quat_normalize(np.array([0.9, 0.2, -0.3, 0.25]))),
        w0_dps=(1.5, 0.0, 1.0),
    ),
}


class TruthTrajectory:
    """Ground-truth relative orbit and attitude, advanced epoch by epoch.

    ``mode="stm"`` uses the filter's own STM family (no model mismatch);
    ``mode="oracle"`` integrates the nonlinear relative motion.
    """

    def __init__(self, model: NavModel, alpha0, q0, w0, mode: str = "stm"):
        self.model = model
        self.mode = mode
        self.t = 0.0
        self._alpha = np.asarray(alpha0, dtype=float).copy()
        self.q = quat_normalize(np.asarray(q0, dtype=float))
        self.w = np.asarray(w0, dtype=float).copy()
        if mode == "oracle":
            self.r, self.v = roe_to_rtn(self._alpha, model.chief, 0.0, model.stm_mode)
            self._chief_state = chief_eci(model.chief, 0.0)

    @property
    def alpha(self) -> np.ndarray:
        if self.mode == "oracle":
            return rtn_to_roe(self.r, self.v, self.model.chief, self.t, self.model.stm_mode)
        return self._alpha.copy()

    @property
    def r_cam(self) -> np.ndarray:
        if self.mode == "oracle":
            return self.model.C_cam_rtn @ self.r
        return relative_position_cam(self.model, self._alpha, self.t)

    @property
    def view_dir(self) -> np.ndarray:
        """Unit vector from target to camera in target body axes."""
        r = self.r_cam
        return -(quat_to_dcm(self.q).T @ r) / np.linalg.norm(r)

    def pose(self) -> Pose:
        return Pose(self.r_cam, self.q)

    def step(self, dt: float) -> None:
        m = self.model
        if self.mode == "oracle":
            self.r, self.v, self._chief_state = oracle_propagate_rtn(
                self.r, self.v, m.chief, dt, mode=m.stm_mode, t0=self.t, chief_state=self._chief_state)
        else:
            self._alpha = roe_stm(m.chief, dt, m.stm_mode) @ self._alpha
        q, w = propagate_attitude_batch(self.q[None], self.w[None], m.inertia, dt, m.cam_rate)
        self.q, self.w = q[0], w[0]
        self.t += dt


def _truth_init(cfg: ScenarioConfig, kind: str):
    pre = PRESETS[kind]
    tc = cfg.truth
    roe_m = np.array(tc.roe_m if tc.roe_m is not None else pre["roe_m"], dtype=float)
    q0 = np.array(tc.q0 if tc.q0 is not None else pre["q0"], dtype=float)
    w0 = np.deg2rad(np.array(tc.w0_dps if tc.w0_dps is not None else pre["w0_dps"], dtype=float))
    a = cfg.orbit.chief().a
    return roe_m / a, quat_normalize(q0), w0


def build_roe1(cfg: ScenarioConfig, model: NavModel | None = None) -> TruthTrajectory:
    """Along-track stationkeeping with a single-axis spin."""
    model = model or cfg.nav_model()
    return TruthTrajectory(model, *_truth_init(cfg, "roe1"), mode=cfg.truth_mode)


def build_roe2(cfg: ScenarioConfig, model: NavModel | None = None) -> TruthTrajectory:
    """Spiral approach with a two-axis tumble."""
    model = model or cfg.nav_model()
    return TruthTrajectory(model, *_truth_init(cfg, "roe2"), mode=cfg.truth_mode)


BUILDERS = {"roe1": build_roe1, "roe2": build_roe2}


# ------------------------------------------------------------------------ log

COLUMNS = (
    "epoch", "t", "range",
    "true_tx", "true_ty", "true_tz", "true_qw", "true_qx", "true_qy", "true_qz",
    "est_tx", "est_ty", "est_tz", "est_qw", "est_qx", "est_qy", "est_qz",
    "sig3_tx", "sig3_ty", "sig3_tz", "sig3_rx_deg", "sig3_ry_deg", "sig3_rz_deg",
    "nees", "e_t", "e_q", "e_t_cal", "e_q_cal",
    "raw_e_t", "raw_e_q",
    "kp_err_det", "kp_err_pred", "kp_err_post",
    "n_valid", "n_accepted", "updated",
    "q_orb", "q_att",
    "ost", "ost_loss", "ost_grad_norm", "ost_rejected", "params_sha1",
)

SUMMARY_KEYS = ("e_t_ss", "e_q_ss", "raw_e_t_ss", "raw_e_q_ss", "kp_err_det_ss", "kp_err_pred_ss",
                "kp_err_post_ss", "nees_ss")


@dataclass
class RunLog:
    rows: list
    summary: dict
    meta: dict
    params: PredictorParams | None = field(default=None, compare=False, repr=False)  # not persisted

    @property
    def status(self) -> str:
        return self.meta.get("status", "ok")

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in COLUMNS])
        return buf.getvalue()

    def write(self, out_dir, stem: str | None = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.meta['name']}_seed{self.meta['seed']}_ost{'on' if self.meta['ost'] else 'off'}"
        path = out_dir / f"{stem}.csv"
        path.write_text(self.to_csv())
        meta = dict(self.meta, summary=self.summary)
        (out_dir / f"{stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunLog":
        path = Path(path)
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            rows = [{k: _parse(v) for k, v in r.items()} for r in rd]
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"name": path.stem}
        summary = meta.pop("summary", None) or {}
        return cls(rows, summary, meta)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


# ------------------------------------------------------------------------ run


def initial_estimate(cfg: ScenarioConfig, model: NavModel, truth: TruthTrajectory, rng):
    """Filter prior: explicit guess from config, else truth plus a P0 draw."""
    fc = cfg.filter
    a = model.chief.a
    sd = np.r_[np.full(6, fc.sigma_roe_m / a), np.full(3, math.radians(fc.sigma_att_deg) / 4.0),
               np.full(3, math.radians(fc.sigma_rate_dps))]
    P0 = np.diag(sd**2)
    err = rng.normal(size=12) * sd
    alpha = truth.alpha + err[:6] if fc.roe_guess_m is None else np.array(fc.roe_guess_m) / a
    q = quat_mul(truth.q, mrp_to_quat(err[6:9])) if fc.q_guess is None else quat_normalize(np.array(fc.q_guess))
    w = truth.w + err[9:] if fc.w_guess_dps is None else np.deg2rad(np.array(fc.w_guess_dps))
    return RelativeState(alpha, np.zeros(3), w, quat_normalize(q), P0, np.zeros((12, 12)), 0.0)


def _kp_err(y, truth_crop, valid) -> float:
    if not np.any(valid):
        return float("nan")
    d = y.reshape(-1, 2)[valid] - truth_crop[valid]
    return float(np.mean(np.linalg.norm(d, axis=1)))


def run(cfg: ScenarioConfig, progress=None) -> RunLog:
    """Simulate one scenario. Deterministic for a fixed ``cfg.seed``."""
    model = cfg.nav_model()
    kp = model.keypoints
    cam = model.cam
    truth = BUILDERS[cfg.trajectory](cfg, model)
    ss = np.random.SeedSequence(cfg.seed)
    rng_init, rng_det = (np.random.default_rng(s) for s in ss.spawn(2))
    state = initial_estimate(cfg, model, truth, rng_init)
    asnc = AsncState(cfg.filter.q_orb, cfg.filter.q_att, capacity=cfg.filter.asnc_window)
    filt = Aukf(model, state, cfg.ut, asnc, adaptive=cfg.filter.adaptive, gate=cfg.filter.gate)
    params = init_params(kp.K, cfg.predictor.hidden, cfg.predictor.init_seed)
    trigger = ViewTrigger(cfg.ost.view_trigger_deg) if cfg.ost.view_trigger_deg is not None else None
    n_epochs = cfg.n_epochs()
    rows = []
    status = "ok"
    checksum = params.checksum()
    for k in range(n_epochs):
        try:
            if k > 0:
                truth.step(cfg.cadence)
                filt.propagate(cfg.cadence)
        except FilterDiverged as exc:
            log.error("filter diverged at epoch %d: %s", k, exc)
            status = "diverged"
            break
        t = k * cfg.cadence
        tp = truth.pose()
        row = dict.fromkeys(COLUMNS, float("nan"))
        row.update(epoch=k, t=t, range=float(np.linalg.norm(tp.t)), n_valid=0, n_accepted=0, updated=0,
                   ost=0, ost_rejected=0)
        out = roi = None
        info = None
        try:
            prior_px = project(relative_position_cam(model, filt.state.alpha, filt.state.t),
                               filt.state.q_ref, kp, cam)
            roi = roi_from_keypoints(prior_px, cfg.filter.roi_margin, cam)
            truth_crop = roi.to_crop(project(tp.t, tp.q, kp, cam))
            raw = detect(truth_crop, truth.view_dir, cfg.gap, rng_det)
            out = forward(params, raw, cfg.predictor.out_scale)
            meas = out.measurement()
            row["kp_err_det"] = _kp_err(out.detected.y, truth_crop, out.valid)
            row["kp_err_pred"] = _kp_err(meas.y, truth_crop, out.valid)
            row["n_valid"] = int(meas.valid.sum())
            try:
                raw_pose = solve_pnp(meas, kp, cam, roi)
                rep = pose_errors(raw_pose, tp)
                row["raw_e_t"], row["raw_e_q"] = rep.e_t, rep.e_q
            except (TooFewPoints, DegenerateGeometry, np.linalg.LinAlgError):
                pass
            pred = filt.predict(roi)
            info = filt.update(meas, pred)
            row["n_accepted"] = info.n_used
            row["updated"] = int(info.updated)
        except BehindCamera:
            log.warning("epoch %d: target not in front of the camera, measurement skipped", k)
        try:
            t_est, q_est, P_pose = state_to_pose(filt.state, model, filt.ut)
        except FilterDiverged as exc:
            log.error("filter diverged at epoch %d: %s", k, exc)
            status = "diverged"
            rows.append(row)
            break
        rep = pose_errors(Pose(t_est, q_est), tp)
        if roi is not None:
            try:
                post_crop = roi.to_crop(project(t_est, q_est, kp, cam))
                row["kp_err_post"] = _kp_err(post_crop.reshape(-1), truth_crop, np.ones(kp.K, dtype=bool))
            except BehindCamera:
                pass
        sig = 3.0 * np.sqrt(np.clip(np.diag(P_pose), 0.0, None))
        row.update(
            true_tx=tp.t[0], true_ty=tp.t[1], true_tz=tp.t[2],
            true_qw=tp.q[0], true_qx=tp.q[1], true_qy=tp.q[2], true_qz=tp.q[3],
            est_tx=t_est[0], est_ty=t_est[1], est_tz=t_est[2],
            est_qw=q_est[0], est_qx=q_est[1], est_qy=q_est[2], est_qz=q_est[3],
            sig3_tx=sig[0], sig3_ty=sig[1], sig3_tz=sig[2],
            sig3_rx_deg=math.degrees(sig[3]), sig3_ry_deg=math.degrees(sig[4]), sig3_rz_deg=math.degrees(sig[5]),
            e_t=rep.e_t, e_q=rep.e_q, e_t_cal=rep.e_t_calibrated, e_q_cal=rep.e_q_calibrated,
            q_orb=filt.asnc.q_orb, q_att=filt.asnc.q_att,
        )
        try:
            row["nees"] = nees(filt.state, model, truth.alpha, truth.q, truth.w)
        except np.linalg.LinAlgError:
            pass
        # the trigger sees only the estimate, never the truth
        view_est = -(quat_to_dcm(q_est).T @ t_est) / np.linalg.norm(t_est)
        if out is not None and schedule(k, cfg.ost, trigger, view_est):
            try:
                pl = make_pseudo_labels(filt.state, model, roi)
            except BehindCamera:
                pl = None
            if pl is not None:
                rejected = int(np.count_nonzero(out.valid & ~info.accepted)) if info is not None else 0
                params, ev = ost_step(params, out, pl, cfg.ost, k, rejected)
                row.update(ost=1 if not ev.skipped else -1, ost_loss=ev.loss_before,
                           ost_grad_norm=ev.grad_norm, ost_rejected=ev.rejected_count)
                checksum = params.checksum()
        row["params_sha1"] = checksum
        rows.append(row)
        if progress is not None:
            progress(k, n_epochs)
    meta = dict(name=cfg.name, trajectory=cfg.trajectory, seed=cfg.seed, ost=bool(cfg.ost.enabled),
                truth_mode=cfg.truth_mode, cadence=cfg.cadence, period=model.chief.period,
                n_epochs=n_epochs, status=status, final_params_sha1=checksum)
    return RunLog(rows, summarize(rows, model.chief.period) if status == "ok" else {}, meta, params)


def summarize(rows, orbit_period: float) -> dict:
    """Second-orbit means of the per-epoch errors.

    Failed single-shot solves (NaN) are left out of the raw means. Runs
    shorter than two orbits get NaN throughout.
    """
    times = np.array([r["t"] for r in rows], dtype=float)
    reports = [ErrorReport(r["e_t"], r["e_q"], r["e_t_cal"], r["e_q_cal"]) for r in rows]
    try:
        e_t_ss, e_q_ss = steady_state_errors(reports, times, orbit_period)
    except InsufficientSpan:
        return dict.fromkeys(SUMMARY_KEYS, float("nan"))
    sel = (times >= orbit_period) & (times <= 2.0 * orbit_period)

    def mean(col):
        v = np.array([r[col] for r in rows], dtype=float)[sel]
        return float(np.nanmean(v)) if np.any(np.isfinite(v)) else float("nan")

    return dict(e_t_ss=e_t_ss, e_q_ss=e_q_ss, raw_e_t_ss=mean("raw_e_t"), raw_e_q_ss=mean("raw_e_q"),
                kp_err_det_ss=mean("kp_err_det"), kp_err_pred_ss=mean("kp_err_pred"),
                kp_err_post_ss=mean("kp_err_post"), nees_ss=mean("nees"))


# -------------------------------------------------------------------- compare


def compare(logs) -> tuple[list, list]:
    """Per-run and grouped (name, OST) mean/std of steady-state errors.

    Returns ``(per_run_rows, group_rows)`` as lists of dicts.
    """
    if not logs:
        raise ValueError("compare needs at least one log")
    per_run = []
    for lg in logs:
        r = dict(name=lg.meta.get("name"), seed=lg.meta.get("seed"), ost="on" if lg.meta.get("ost") else "off",
                 status=lg.status)
        r.update({k: lg.summary.get(k, float("nan")) for k in SUMMARY_KEYS})
        per_run.append(r)
    groups = {}
    for r in per_run:
        groups.setdefault((r["name"], r["ost"]), []).append(r)
    grouped = []
    for (name, ost), rs in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        g = dict(name=name, ost=ost, n=len(rs))
        for k in SUMMARY_KEYS:
            v = np.array([x[k] for x in rs], dtype=float)
            g[f"{k}_mean"] = float(np.nanmean(v)) if np.any(np.isfinite(v)) else float("nan")
            g[f"{k}_std"] = float(np.nanstd(v)) if np.any(np.isfinite(v)) else float("nan")
        grouped.append(g)
    return per_run, grouped


def table_csv(rows) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def table_text(rows) -> str:
    """Aligned plain-text rendering of a list of dicts."""
    if not rows:
        return ""
    cols = list(rows[0])

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    cells = [[cell(r[c]) for c in cols] for r in rows]
    width = [max(len(c), *(len(x[i]) for x in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(width[i]) for i, c in enumerate(cols))]
    lines += ["  ".join(x[i].rjust(width[i]) for i in range(len(cols))) for x in cells]
    return "\n".join(lines) + "\n"


def gnuplot_script(csv_path) -> str:
    """Script that plots filter and single-shot errors against time."""
    p = str(csv_path)
    return (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set xlabel 't [s]'\n"
        "set multiplot layout 2,1\n"
        "set ylabel 'E_t [m]'\n"
        f"plot '{p}' using 't':'e_t' with lines, '' using 't':'raw_e_t' with points pt 7 ps 0.2\n"
        "set ylabel 'E_q [deg]'\n"
        f"plot '{p}' using 't':'e_q' with lines, '' using 't':'raw_e_q' with points pt 7 ps 0.2\n"
        "unset multiplot\n"
    )


def sweep(cfg: ScenarioConfig, severities, seeds, progress=None):
    """OST on/off runs over a range of detector-gap severities.

    A larger severity stands in for a network whose offline training was
    stopped earlier. Returns ``(severity, per_run, grouped)`` per severity.
    """
    base_gap = cfg.gap
    out = []
    for sev in severities:
        logs = []
        for seed in seeds:
            for ost in (False, True):
                c = replace(cfg.with_overrides(seed=seed, ost=ost), gap=base_gap.scaled(sev),
                            name=f"{cfg.name}_sev{sev:g}")
                logs.append(run(c))
                if progress is not None:
                    progress(sev, seed, ost)
        per_run, grouped = compare(logs)
        for g in grouped:
            g["severity"] = sev
        out.append((sev, per_run, grouped))
    return out


def log_dir(default="runs") -> Path:
    return Path(os.environ.get(LOG_DIR_ENV, default))


def view_diversity(view_dirs, max_samples: int = 400) -> float:
    """Mean pairwise angle (rad) between viewing directions."""
    d = np.asarray(view_dirs, dtype=float)
    if d.shape[0] > max_samples:
        d = d[np.linspace(0, d.shape[0] - 1, max_samples).astype(int)]
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    c = np.clip(d @ d.T, -1.0, 1.0)
    iu = np.triu_indices(d.shape[0], 1)
    return float(np.mean(np.arccos(c[iu])))


def truth_views(cfg: ScenarioConfig):
    """Truth-only sweep: times, ranges, viewing directions and pixel boxes."""
    model = cfg.nav_model()
    truth = BUILDERS[cfg.trajectory](cfg, model)
    n = cfg.n_epochs()
    rng, views, px = np.empty(n), np.empty((n, 3)), np.empty((n, model.keypoints.K, 2))
    for k in range(n):
        if k > 0:
            truth.step(cfg.cadence)
        tp = truth.pose()
        rng[k] = np.linalg.norm(tp.t)
        views[k] = truth.view_dir
        px[k] = project(tp.t, tp.q, model.keypoints, model.cam)
    return rng, views, px

