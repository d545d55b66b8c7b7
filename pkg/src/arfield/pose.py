"""Articulated pose estimation by analysis-by-synthesis.

The joint angle is recovered by minimizing the photometric residual
between articulation-aware renders and a target image. The search space is
one-dimensional per joint, so gradients come from central finite
differences of the scalar loss; multi-start gradient descent with
backtracking handles the plateaus and local minima that appear when the
query articulation is far from the target.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .articulation import (ArticulatedPose, build_deformations,
                           composite_articulated, render_articulated)
from .fields import ProceduralField
from .rendering import RenderConfig


@dataclass(frozen=True)
class PoseOptConfig:
    """Optimizer settings for the 1D angle search (radians throughout)."""

    a_min: float
    a_max: float
    restarts: int = 4
    max_iters: int = 100
    tol: float = np.radians(0.02)
    fd_step: float = np.radians(0.25)
    batch_rays: int = 1024
    seed: int = 0
    max_step: float = np.radians(10.0)
    init_angles: tuple | None = None

    def __post_init__(self):
        if not np.isfinite(self.a_min) or not np.isfinite(self.a_max) \
                or self.a_min >= self.a_max:
            raise ValueError("need finite bounds with a_min < a_max")
        if self.batch_rays < 1 or self.restarts < 1:
            raise ValueError("batch_rays and restarts must be positive")


class PoseOptProblem:
    """Frozen field + target image + joint attributes for pose recovery."""

    def __init__(self, fieldobj, camera, target: np.ndarray, joints,
                 rest: ArticulatedPose, render: RenderConfig, opt: PoseOptConfig,
                 cond=None, fine_field=None):
        joints = list(joints)
        if len(joints) != 1:
            raise ValueError("pose optimization handles one revolute joint")
        target = np.asarray(target, dtype=np.float64)
        if target.shape != (camera.height, camera.width, 3):
            raise ValueError(f"target image {target.shape} does not match camera")
        self.field = fieldobj
        self.camera = camera
        self.target = target
        self.joints = joints
        self.rest = rest
        self.render = render
        self.opt = opt
        self.cond = cond
        self.fine_field = fine_field
        self._origins, self._dirs = camera.all_pixel_rays((render.t_near, render.t_far))
        self._target_flat = target.reshape(-1, 3)
        self._edges = np.linspace(render.t_near, render.t_far, render.k_coarse + 1)

    def sample_batch(self, rng: np.random.Generator) -> "RayBatch":
        n = self.camera.width * self.camera.height
        idx = rng.integers(0, n, size=self.opt.batch_rays)
        jitter = rng.random((self.opt.batch_rays, self.render.k_coarse)) \
            if self.render.jitter else None
        return RayBatch(pixel_idx=idx, jitter=jitter)


@dataclass
class RayBatch:
    """Fixed pixel subset (and jitter) so loss probes share their rays."""

    pixel_idx: np.ndarray
    jitter: np.ndarray | None = None


@dataclass
class RestartResult:
    init_angle: float
    angle: float
    full_loss: float
    converged: bool
    trace: list  # (angle, batch loss) per iteration


@dataclass
class PoseEstimate:
    """Best restart of the angle search."""

    angle: float            # radians, within bounds
    loss: float             # full-image photometric loss at `angle`
    converged: bool
    restarts: list

    @property
    def angle_deg(self) -> float:
        return float(np.degrees(self.angle))


def _field_at(problem: PoseOptProblem, a: float):
    pose = ArticulatedPose(np.array([a]))
    return build_deformations(pose, problem.joints, problem.field.num_parts,
                              rest=problem.rest)


def pose_loss(a: float, problem: PoseOptProblem, batch: RayBatch) -> float:
    """Mean squared color error over the batch at query angle a."""
    opt = problem.opt
    if not (opt.a_min - 1e-12 <= a <= opt.a_max + 1e-12):
        raise ValueError(f"angle {a} outside bounds")
    idx = batch.pixel_idx
    u = batch.jitter if batch.jitter is not None \
        else np.full((len(idx), problem.render.k_coarse), 0.5)
    t = problem._edges[:-1] + u * np.diff(problem._edges)
    out = composite_articulated(problem.field, problem._origins[idx],
                                problem._dirs[idx], t, _field_at(problem, a),
                                problem.render.t_far, problem.render.background,
                                cond=problem.cond)
    return float(np.mean((out.color - problem._target_flat[idx]) ** 2))


def pose_gradient(a: float, problem: PoseOptProblem, batch: RayBatch) -> float:
    """Central finite difference of pose_loss; one-sided at the bounds."""
    h = problem.opt.fd_step
    lo, hi = problem.opt.a_min, problem.opt.a_max
    ap, am = min(a + h, hi), max(a - h, lo)
    if ap <= am:
        raise ValueError("finite-difference step exceeds the bound interval")
    return (pose_loss(ap, problem, batch) - pose_loss(am, problem, batch)) / (ap - am)


def full_image_loss(problem: PoseOptProblem, a: float) -> float:
    res = render_articulated(problem.field, problem.camera,
                             ArticulatedPose(np.array([a])), problem.joints,
                             problem.render, cond=problem.cond,
                             fine_field=problem.fine_field, rest=problem.rest)
    return float(np.mean((res.color - problem.target) ** 2))


def _descend(problem: PoseOptProblem, a0: float, rng: np.random.Generator
             ) -> RestartResult:
    opt = problem.opt
    a = float(np.clip(a0, opt.a_min, opt.a_max))
    trace = []
    converged = False
    step_scale = None
    for _ in range(opt.max_iters):
        batch = problem.sample_batch(rng)
        loss_here = pose_loss(a, problem, batch)
        trace.append((a, loss_here))
        g = pose_gradient(a, problem, batch)
        if abs(g) < 1e-14:
            break  # plateau: no usable descent direction
        t = opt.max_step / abs(g) if step_scale is None else min(2.0 * step_scale,
                                                                 opt.max_step / abs(g))
        a_new = None
        for _ in range(14):
            cand = float(np.clip(a - t * g, opt.a_min, opt.a_max))
            if cand != a and pose_loss(cand, problem, batch) \
                    <= loss_here - 1e-4 * abs(cand - a) * abs(g):
                a_new = cand
                step_scale = t
                break
            t *= 0.5
        if a_new is None:
            break  # no decrease at any step length: at the batch noise floor
        moved = abs(a_new - a)
        a = a_new
        if moved < opt.tol:
            converged = True
            break
    return RestartResult(init_angle=float(a0), angle=a,
                         full_loss=full_image_loss(problem, a),
                         converged=converged, trace=trace)


def estimate_pose(problem: PoseOptProblem) -> PoseEstimate:
    """Multi-start damped gradient descent; restarts ranked by full-image loss.

    Restart initializations are equispaced across the bounds (bin midpoints)
    unless opt.init_angles overrides them. Deterministic given opt.seed.
    """
    opt = problem.opt
    if opt.init_angles is not None:
        inits = list(opt.init_angles)
    else:
        span = opt.a_max - opt.a_min
        inits = [opt.a_min + (i + 0.5) * span / opt.restarts for i in range(opt.restarts)]
    results = []
    for r, a0 in enumerate(inits):
        rng = np.random.default_rng([opt.seed, r])
        results.append(_descend(problem, a0, rng))
    best = int(np.argmin([r.full_loss for r in results]))
    win = results[best]
    return PoseEstimate(angle=win.angle, loss=win.full_loss,
                        converged=win.converged, restarts=results)


def error_heatmap(scene, camera, source_angles: np.ndarray, target_angles: np.ndarray,
                  render_cfg: RenderConfig, opt_cfg: PoseOptConfig,
                  init_at_source: bool = True, joints=None):
    """|estimated - true| angle matrix over source x target articulations.

    Each row conditions the field at one source articulation (the rest
    pose); each column renders the physically re-posed scene as the target
    observation. By default every cell starts its search at the source
    angle, the natural no-deformation guess. Angles are radians; returns
    (matrix (S, T) of absolute errors in radians, list of PoseEstimates).
    """
    from .rendering import render_image

    source_angles = np.atleast_1d(np.asarray(source_angles, dtype=np.float64))
    target_angles = np.atleast_1d(np.asarray(target_angles, dtype=np.float64))
    joints = list(scene.joints) if joints is None else list(joints)
    errors = np.zeros((len(source_angles), len(target_angles)))
    estimates = []
    for i, a_src in enumerate(source_angles):
        field_scene = scene.posed([a_src])
        fieldobj = ProceduralField(field_scene)
        rest = ArticulatedPose(np.array([a_src]))
        for j, a_tgt in enumerate(target_angles):
            target = render_image(ProceduralField(scene.posed([a_tgt])), camera,
                                  render_cfg).color
            opt = opt_cfg
            if init_at_source:
                opt = dataclasses.replace(opt_cfg, init_angles=(float(a_src),))
            problem = PoseOptProblem(fieldobj, camera, target, joints, rest,
                                     render_cfg, opt)
            est = estimate_pose(problem)
            errors[i, j] = abs(est.angle - a_tgt)
            estimates.append(est)
    return errors, estimates
