"""Recover a point cloud (and, without pose labels, per-view cameras) from views.

Shape and pose are free parameters optimized with Adam. Without pose labels,
every view owns ``K`` pose candidates; each step only the candidate whose
rendering matches the view best receives gradient (the hindsight loss), and
a per-view student pose is distilled from that winner.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diff import vjp_trace
from .geom import (
    CameraModel,
    GridSpec,
    PointCloud,
    Pose,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    random_quat,
)
from .render import render_trace

log = logging.getLogger(__name__)


class FitDivergence(RuntimeError):
    """Raised when a loss turns non-finite; ``dump_path`` points at the saved state."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Sum of squared differences and its cotangent ``2 (pred - target)``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.sum(diff * diff)), 2.0 * diff


def hindsight_select(candidate_losses) -> tuple[int, float]:
    """Index and value of the smallest loss; ties go to the lowest index."""
    losses = np.asarray(candidate_losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("need at least one candidate loss")
    if not np.all(np.isfinite(losses)):
        raise ValueError("non-finite candidate loss")
    idx = int(np.argmin(losses))
    return idx, float(losses[idx])


def quat_distill_loss(student, teacher, canonicalize_teacher_sign: bool = True) -> tuple[float, np.ndarray]:
    """``1 - Re(q_s q_t⁻¹) / |q_s q_t⁻¹|`` and its gradient w.r.t. the student.

    ``Re(q_s q_t⁻¹) / |q_s q_t⁻¹|`` reduces to the cosine between the two
    quaternions as 4-vectors. With ``canonicalize_teacher_sign`` the teacher
    is flipped when that cosine is negative, so ``q`` and ``-q`` agree.
    """
    qs = np.asarray(student, dtype=np.float64)
    qt = np.asarray(teacher, dtype=np.float64)
    ns, nt = np.linalg.norm(qs), np.linalg.norm(qt)
    if ns < 1e-300 or nt < 1e-300:
        raise ValueError("zero-norm quaternion")
    cos = float(qs @ qt / (ns * nt))
    if canonicalize_teacher_sign and cos < 0:
        qt, cos = -qt, -cos
    grad = -(qt / (ns * nt) - cos * qs / ns**2)
    return float(1.0 - cos), grad


# --------------------------------------------------------------------------
# schedules, dropout
# --------------------------------------------------------------------------


@dataclass
class Schedules:
    """Linear schedules over ``total_steps``; sigma values are fractions of the cube extent."""

    total_steps: int = 1
    dropout_start: float = 0.9
    dropout_end: float = 0.0
    sigma_start: float = 0.05
    sigma_end: float = 0.003
    extent: float = 1.0


def _lerp(a: float, b: float, frac: float) -> float:
    if frac <= 0.0:
        return a
    if frac >= 1.0:
        return b
    return a + (b - a) * frac


def schedule_eval(s: Schedules, t: int) -> tuple[float, float]:
    """``(dropout_fraction, sigma)`` at step ``t``, clamped to ``[0, total_steps]``."""
    if t < 0:
        raise ValueError("step must be nonnegative")
    frac = t / s.total_steps if s.total_steps > 0 else 1.0
    dropout = _lerp(s.dropout_start, s.dropout_end, frac)
    sigma = _lerp(s.sigma_start, s.sigma_end, frac) * s.extent
    return dropout, sigma


def dropout_mask(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each point with probability ``1 - fraction``; never returns an empty mask."""
    if n == 0:
        return np.zeros(0, dtype=bool)
    if fraction <= 0.0:
        return np.ones(n, dtype=bool)
    while True:
        mask = rng.random(n) >= fraction
        if mask.any():
            return mask


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a dict of arrays.

    Parameters listed in ``unit_norm`` are quaternion stacks (last axis 4)
    that are projected back onto the unit sphere after every step.
    """

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_scale: dict[str, float] | None = None, unit_norm: tuple[str, ...] = ()):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_scale = dict(lr_scale or {})
        self.unit_norm = tuple(unit_norm)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for key, g in grads.items():
            if g is None:
                continue
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr = self.lr * self.lr_scale.get(key, 1.0)
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[key] -= update
            if key in self.unit_norm:
                # only touched rows are renormalized so idle quaternions stay bit-identical
                moved = np.any(update != 0, axis=-1)
                params[key][moved] = quat_normalize(params[key][moved])


def adam_step(params, grads, state: Adam) -> None:
    """Functional spelling of :meth:`Adam.step` (updates ``params`` in place)."""
    state.step(params, grads)


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


@dataclass
class ViewSet:
    images: list[np.ndarray]
    cam: CameraModel
    grid: GridSpec
    modality: str = "silhouette"
    poses: list[Pose] | None = None

    def __post_init__(self):
        if not self.images:
            raise ValueError("empty view set")
        shape = self.images[0].shape
        if any(img.shape != shape for img in self.images):
            raise ValueError("all views must have the same dimensions")
        if self.poses is not None and len(self.poses) != len(self.images):
            raise ValueError("one pose per view is required")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class FitConfig:
    n_points: int = 2000
    K: int = 4
    steps: int = 1000
    lr: float = 1e-4
    path: str = "fast"
    supervised: bool = False
    seed: int = 0
    schedules: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learn_scale: bool = True
    learn_sigma: bool = False
    full_covariance: bool = False
    init_scale: float = 0.5
    init_radius: float = 0.25
    pose_lr_scale: float = 1.0
    student_lr_scale: float = 1.0
    candidate_azimuths: list | None = None
    pose_jitter_deg: float = 5.0
    learn_translation: bool = True
    distill_weight: float = 1.0
    canonicalize_teacher_sign: bool = True
    views_per_step: int | None = None
    threads: int = 1
    background: list | None = None
    truncation: float = 3.0

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known - {"format_version"}
        if unknown:
            raise ValueError(f"unknown fit config field(s): {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_dict(self) -> dict:
        return {"format_version": 1, **asdict(self)}

    def schedule(self, extent: float) -> Schedules:
        return Schedules(total_steps=self.steps, extent=extent, **self.schedules)


@dataclass
class StepRecord:
    step: int
    hindsight_loss: float
    views: list[int]
    selected: list[int]
    student_loss: float
    dropout: float
    sigma: float
    candidate_losses: list[list[float]] | None = None


@dataclass
class FitResult:
    cloud: PointCloud
    poses: list[Pose]
    students: list[Pose]
    trace: list[StepRecord]
    config: FitConfig


def up_rotation(angle_deg: float) -> np.ndarray:
    """Quaternion for a rotation about the world up axis (+y)."""
    return quat_from_axis_angle([0.0, 1.0, 0.0], math.radians(angle_deg))


class FitState:
    """Unconstrained optimization variables plus the maps to constrained values.

    Positions are ``half_width * tanh(raw)`` so they stay in the canonical
    cube; scales are ``sigmoid(logit)``; learned sigmas and covariance
    diagonals are stored as logs.
    """

    def __init__(self, config: FitConfig, n_views: int, cam: CameraModel, channels: int = 0):
        self.config = config
        self.cam = cam
        self.half_width = cam.half_width
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        self.init_rng = np.random.default_rng(seeds[0])
        self.mask_rng = np.random.default_rng(seeds[1])
        self.view_rng = np.random.default_rng(seeds[2])
        rng = self.init_rng
        n = config.n_points
        direction = rng.standard_normal((n, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = config.init_radius * rng.random(n) ** (1.0 / 3.0)
        start = np.clip(direction * radius[:, None] / self.half_width, -0.999, 0.999)
        p: dict[str, np.ndarray] = {
            "positions": np.arctanh(start),
            "scale_logits": np.full(n, _logit(config.init_scale)),
        }
        sched = config.schedule(cam.extent)
        _, sigma0 = schedule_eval(sched, 0)
        if config.full_covariance:
            p["log_cov_diag"] = np.full((n, 3), math.log(sigma0))
            p["cov_rotation"] = random_quat(rng, n)
        elif config.learn_sigma:
            p["log_sigmas"] = np.full(n, math.log(sigma0))
        if channels:
            p["color_logits"] = np.zeros((n, channels))
        if not config.supervised:
            k = config.K
            azimuths = config.candidate_azimuths or [360.0 * i / k for i in range(k)]
            if len(azimuths) != k:
                raise ValueError("candidate_azimuths must list K angles")
            rot = np.empty((n_views, k, 4))
            jitter = math.radians(config.pose_jitter_deg)
            for v in range(n_views):
                for i, az in enumerate(azimuths):
                    axis = rng.standard_normal(3)
                    small = quat_from_axis_angle(axis, jitter * rng.standard_normal())
                    rot[v, i] = quat_mul(small, up_rotation(az))
            p["candidate_rotation"] = rot
            p["candidate_translation"] = np.tile([0.0, 0.0, cam.default_distance()], (n_views, k, 1))
            p["student_rotation"] = rot[:, 0].copy()
        self.params = p
        unit = ("cov_rotation", "candidate_rotation", "student_rotation")
        self.adam = Adam(
            config.lr, config.beta1, config.beta2, config.eps,
            lr_scale={
                "candidate_rotation": config.pose_lr_scale,
                "candidate_translation": config.pose_lr_scale,
                "student_rotation": config.student_lr_scale,
            },
            unit_norm=unit,
        )
        self.t = 0

    def cloud(self, sigma: float) -> PointCloud:
        p = self.params
        kwargs = {}
        if self.config.full_covariance:
            kwargs = {"cov_diag": np.exp(p["log_cov_diag"]), "cov_rotation": p["cov_rotation"]}
        elif self.config.learn_sigma:
            kwargs = {"sigmas": np.exp(p["log_sigmas"])}
        else:
            kwargs = {"sigmas": np.full(len(p["positions"]), sigma)}
        colors = _sigmoid(p["color_logits"]) if "color_logits" in p else None
        return PointCloud(
            self.half_width * np.tanh(p["positions"]), _sigmoid(p["scale_logits"]), colors=colors, **kwargs
        )

    def candidate_pose(self, view: int, k: int) -> Pose:
        return Pose(self.params["candidate_rotation"][view, k], self.params["candidate_translation"][view, k])

    def cloud_grads(self, g) -> dict[str, np.ndarray]:
        """Chain render gradients through the squashing maps."""
        p = self.params
        out = {"positions": g.d_positions * self.half_width / np.cosh(p["positions"]) ** 2}
        if self.config.learn_scale:
            s = _sigmoid(p["scale_logits"])
            out["scale_logits"] = g.d_scales * s * (1.0 - s)
        if self.config.full_covariance:
            out["log_cov_diag"] = g.d_cov_diag * np.exp(p["log_cov_diag"])
            out["cov_rotation"] = g.d_cov_rotation
        elif self.config.learn_sigma:
            out["log_sigmas"] = g.d_sigmas * np.exp(p["log_sigmas"])
        if "color_logits" in p and g.d_colors is not None:
            c = _sigmoid(p["color_logits"])
            out["color_logits"] = g.d_colors * c * (1.0 - c)
        return out

    def snapshot(self) -> dict:
        return {
            "t": self.t,
            "params": {k: v.tolist() for k, v in self.params.items()},
            "config": self.config.to_dict(),
        }


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p: float) -> float:
    p = min(max(p, 1e-6), 1 - 1e-6)
    return math.log(p / (1.0 - p))


def _add(acc: dict, grads: dict) -> None:
    for key, g in grads.items():
        if key in acc:
            acc[key] = acc[key] + g
        else:
            acc[key] = g


def _view_step(state: FitState, views: ViewSet, j: int, cloud: PointCloud, mask, cfg: FitConfig):
    """Loss and gradient contributions of one view."""
    target = views.images[j]
    kw = dict(modality=views.modality, path=cfg.path, dropout_mask=mask,
              background=cfg.background, truncation=cfg.truncation)
    if cfg.supervised:
        pose = views.poses[j]
        trace = render_trace(cloud, pose, views.cam, views.grid, **kw)
        loss, cot = mse_loss(trace.image, target)
        g = vjp_trace(trace, cloud, pose, views.cam, views.grid, cot, want_sigma=False)
        return loss, [loss], 0, state.cloud_grads(g), None
    traces, losses, cots = [], [], []
    for k in range(cfg.K):
        trace = render_trace(cloud, state.candidate_pose(j, k), views.cam, views.grid, **kw)
        loss, cot = mse_loss(trace.image, target)
        traces.append(trace)
        losses.append(loss)
        cots.append(cot)
    if not all(math.isfinite(x) for x in losses):
        return math.nan, losses, -1, {}, None
    best, value = hindsight_select(losses)
    pose = state.candidate_pose(j, best)
    g = vjp_trace(traces[best], cloud, pose, views.cam, views.grid, cots[best], want_sigma=False)
    return value, losses, best, state.cloud_grads(g), (g.d_rotation, g.d_translation)


def fit_views(views: ViewSet, config: FitConfig, dump_dir: Path | None = None, record_candidates: bool = False,
              callback=None) -> FitResult:
    """Optimize a cloud (and poses when ``config.supervised`` is False) to match ``views``."""
    cfg = config
    if cfg.n_points < 1:
        raise ValueError("n_points must be at least 1")
    if cfg.supervised and views.poses is None:
        raise ValueError("supervised fitting needs ground-truth poses")
    if not cfg.supervised and len(views) < 2:
        raise ValueError("pose-free fitting needs at least two views")
    if cfg.path == "fast" and (cfg.full_covariance or cfg.learn_sigma):
        raise ValueError("fast path requires shared sigma")
    channels = views.images[0].shape[-1] if views.modality == "color" else 0
    state = FitState(cfg, len(views), views.cam, channels)
    sched = cfg.schedule(views.cam.extent)
    trace: list[StepRecord] = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for t in range(cfg.steps):
            dropout, sigma = schedule_eval(sched, t)
            cloud = state.cloud(sigma)
            mask = dropout_mask(len(cloud), dropout, state.mask_rng)
            if cfg.views_per_step and cfg.views_per_step < len(views):
                chosen = np.sort(state.view_rng.choice(len(views), cfg.views_per_step, replace=False))
            else:
                chosen = np.arange(len(views))
            work = [(j,) for j in chosen]
            run = lambda j: _view_step(state, views, j, cloud, mask, cfg)  # noqa: E731
            results = list(pool.map(lambda a: run(*a), work)) if pool else [run(*a) for a in work]

            grads: dict[str, np.ndarray] = {}
            total, student_total = 0.0, 0.0
            selected, all_losses = [], []
            p = state.params
            if not cfg.supervised:
                grads["candidate_rotation"] = np.zeros_like(p["candidate_rotation"])
                grads["candidate_translation"] = np.zeros_like(p["candidate_translation"])
                grads["student_rotation"] = np.zeros_like(p["student_rotation"])
            for j, (value, losses, best, cgrads, pgrads) in zip(chosen, results):
                if not math.isfinite(value):
                    path = _dump(state, dump_dir)
                    raise FitDivergence(f"non-finite loss at step {t}, view {j}", path)
                total += value
                selected.append(best)
                all_losses.append(losses)
                _add(grads, cgrads)
                if pgrads is not None:
                    grads["candidate_rotation"][j, best] = pgrads[0]
                    if cfg.learn_translation:
                        grads["candidate_translation"][j, best] = pgrads[1]
                    teacher = p["candidate_rotation"][j, best]
                    s_loss, s_grad = quat_distill_loss(p["student_rotation"][j], teacher, cfg.canonicalize_teacher_sign)
                    student_total += s_loss
                    grads["student_rotation"][j] = cfg.distill_weight * s_grad
            if not math.isfinite(total):
                raise FitDivergence(f"non-finite loss at step {t}", _dump(state, dump_dir))
            state.adam.step(p, grads)
            state.t = t + 1
            rec = StepRecord(t, total, [int(j) for j in chosen], selected, student_total, dropout, sigma,
                             all_losses if record_candidates else None)
            trace.append(rec)
            if callback is not None:
                callback(state, rec)
    finally:
        if pool is not None:
            pool.shutdown()

    _, sigma = schedule_eval(sched, cfg.steps)
    cloud = state.cloud(sigma)
    if cfg.supervised:
        poses = list(views.poses)
        students = list(views.poses)
    else:
        best = _latest_selection(trace, len(views))
        poses = [state.candidate_pose(j, best[j]).normalized() for j in range(len(views))]
        students = [Pose(state.params["student_rotation"][j], poses[j].translation) for j in range(len(views))]
    return FitResult(cloud, poses, students, trace, cfg)


def _latest_selection(trace: list[StepRecord], n_views: int) -> list[int]:
    """Most recent winning candidate of every view (views may be subsampled per step)."""
    best = [0] * n_views
    seen = [False] * n_views
    for rec in reversed(trace):
        if all(seen):
            break
        for j, k in zip(rec.views, rec.selected):
            if not seen[j]:
                best[j], seen[j] = k, True
    return best


def _dump(state: FitState, dump_dir: Path | None) -> Path | None:
    if dump_dir is None:
        return None
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / "divergence_state.json"
    path.write_text(json.dumps(state.snapshot()))
    log.error("fit diverged; state written to %s", path)
    return path
