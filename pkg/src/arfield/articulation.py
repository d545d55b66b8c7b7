"""Articulated pose handling and articulation-aware volume rendering.

A query pose deforms camera-ray sample points back into the field's rest
configuration, once per part class, and the per-class field outputs are
merged under per-sample part weights. With all deformations equal to the
identity the merged result equals plain compositing exactly (same value
for every output; asserted in tests), because the merge is computed as a
running convex combination that adds exact zeros when the class values
coincide, and the compositing tail is shared with the plain renderer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, rotation_about_axis
from .rendering import (RenderConfig, RenderResult, RenderedRays, _deltas,
                        _finish_rays, sample_hierarchical)


@dataclass(frozen=True)
class JointAttributes:
    """Revolute joint: unit axis direction, pivot point, and the moving part."""

    axis: np.ndarray
    pivot: np.ndarray
    child_part: int

    def __post_init__(self):
        u = np.asarray(self.axis, dtype=np.float64)
        v = np.asarray(self.pivot, dtype=np.float64)
        n = np.linalg.norm(u)
        if n < 1e-12:
            raise ValueError("joint axis has zero norm")
        u = u / n
        if u.shape != (3,) or v.shape != (3,):
            raise ValueError("axis and pivot must be 3-vectors")
        u.flags.writeable = False
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "axis", u)
        object.__setattr__(self, "pivot", v)


@dataclass(frozen=True)
class ArticulatedPose:
    """Joint angles in radians, one per non-root part (joint order)."""

    angles: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.angles, dtype=np.float64))
        if not np.all(np.isfinite(a)):
            raise ValueError("pose angles must be finite")
        a.flags.writeable = False
        object.__setattr__(self, "angles", a)

    @staticmethod
    def from_degrees(angles_deg) -> "ArticulatedPose":
        return ArticulatedPose(np.radians(np.atleast_1d(np.asarray(angles_deg, dtype=np.float64))))


@dataclass(frozen=True)
class DeformationSet:
    """One rigid transform per class index 0..P (parts then background).

    Each transform maps query-space points back into the field's rest
    configuration. Root part and background are always the identity.
    """

    transforms: tuple

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))

    def __len__(self) -> int:
        return len(self.transforms)

    def __getitem__(self, i: int) -> RigidTransform:
        return self.transforms[i]

    def all_identity(self) -> bool:
        return all(t.is_identity() for t in self.transforms)


def build_deformations(pose: ArticulatedPose, joints, num_parts: int,
                       rest: ArticulatedPose | None = None) -> DeformationSet:
    """Deformation set for a query pose relative to a rest pose.

    For each joint the child part's transform rotates by -(angle - rest)
    about the joint axis, mapping query-space points to rest-space ones.
    Unjointed parts (the root) and the background stay identity.
    """
    joints = list(joints)
    angles = pose.angles
    if len(angles) != len(joints):
        raise ValueError(f"pose has {len(angles)} angles for {len(joints)} joints")
    rest_angles = np.zeros(len(joints)) if rest is None else rest.angles
    if rest_angles.shape != angles.shape:
        raise ValueError("rest pose has a different number of joints")
    children = [j.child_part for j in joints]
    if len(set(children)) != len(children) or any(not (1 <= c <= num_parts) for c in children):
        raise ValueError("joints must name distinct parts within 1..num_parts")

    transforms = [RigidTransform.identity() for _ in range(num_parts + 1)]
    for j, a, a0 in zip(joints, angles, rest_angles):
        transforms[j.child_part - 1] = rotation_about_axis(j.axis, j.pivot, -(a - a0))
    return DeformationSet(tuple(transforms))


def _own_class_softmax(logits: np.ndarray, class_idx: int) -> tuple[np.ndarray, np.ndarray]:
    """(probability of class_idx, full probability row) with exact row sums.

    The last class's probability is computed as the complement of the
    others, so summing a row left to right yields exactly 1.0. That makes
    the weighted mixture below collapse bitwise in the identity case.
    """
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)
    p[..., -1] = 1.0 - np.sum(p[..., :-1], axis=-1)
    return p[..., class_idx], p


def _weighted_mix(values: list[np.ndarray], weights: list[np.ndarray]) -> np.ndarray:
    """sum_i w_i v_i, computed as (running weighted mean) * (running total).

    The running mean adds an exact zero whenever v_i equals the running
    value, so identical values yield mean * fl(sum(w)); with weights that
    sum to exactly 1.0 the mixture then passes the common value through
    unchanged to the last bit.
    """
    acc = values[0].copy()
    total = weights[0].copy()
    for v, w in zip(values[1:], weights[1:]):
        total = total + w
        f = np.where(total > 0.0, w / np.where(total > 0.0, total, 1.0), 0.0)
        acc += f * (v - acc)
    return acc * total


def composite_articulated(field, origins: np.ndarray, dirs: np.ndarray,
                          t_vals: np.ndarray, deformations: DeformationSet,
                          t_far: float, background: np.ndarray,
                          cond=None) -> RenderedRays:
    """Merge per-part deformed field evaluations along rays.

    Every sample point x is pulled back through each class's deformation
    and evaluated. The per-sample weight of class i is the probability the
    field assigns to class i at the class-i deformed point (its "ownership"
    of the material found there); the weights are NOT renormalized across
    classes. Samples nobody owns, such as the rest-pose location a part
    has moved away from, where every class sees material labelled as some
    other class, then contribute almost nothing instead of being revived
    by normalization as a ghost. Mixed optical depth is sum_i w_i sigma_i
    and the absorbed color/logit terms mix the per-class absorbed terms
    the same way, after which the plain compositing tail runs. In the
    identity case each sample's weights are one softmax row, whose exact
    unit sum makes the output equal plain compositing bit for bit.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t_vals = np.atleast_2d(np.asarray(t_vals, dtype=np.float64))
    if np.any(np.diff(t_vals, axis=1) < 0):
        raise ValueError("t_vals must be sorted ascending along each ray")
    n, k = t_vals.shape
    num_classes = field.num_parts + 1
    if len(deformations) != num_classes:
        raise ValueError(f"need {num_classes} deformations, got {len(deformations)}")
    background = np.asarray(background, dtype=np.float64)

    pts = (origins[:, None, :] + t_vals[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    d_rep = np.repeat(dirs, k, axis=0)
    delta = _deltas(t_vals, t_far)

    sigmas, part_w, c_terms, s_terms = [], [], [], []
    for i in range(num_classes):
        pts_i = deformations[i].apply(pts)
        feats = None if cond is None else cond.features_at(pts_i)
        vals = field.evaluate(pts_i, d_rep, feats)
        sigma_i = np.asarray(vals.sigma, dtype=np.float64).reshape(n, k)
        color_i = np.asarray(vals.color, dtype=np.float64).reshape(n, k, 3)
        logits_i = np.asarray(vals.logits, dtype=np.float64).reshape(n, k, num_classes)
        absorb_i = 1.0 - np.exp(-(sigma_i * delta))
        own_prob, _ = _own_class_softmax(logits_i, i)
        sigmas.append(sigma_i)
        part_w.append(own_prob)
        c_terms.append(absorb_i[:, :, None] * color_i)
        s_terms.append(absorb_i[:, :, None] * logits_i)

    sigma_mix = _weighted_mix(sigmas, part_w)
    tau_mix = sigma_mix * delta
    color_mix = _weighted_mix(c_terms, [w[:, :, None] for w in part_w])
    logit_mix = _weighted_mix(s_terms, [w[:, :, None] for w in part_w])
    return _finish_rays(tau_mix, color_mix, logit_mix, background, num_classes)


def render_articulated(field, camera, pose: ArticulatedPose, joints,
                       config: RenderConfig, cond=None, fine_field=None,
                       rest: ArticulatedPose | None = None) -> RenderResult:
    """Full-image articulation-aware render (see render_image for contracts)."""
    h, w = camera.height, camera.width
    origins, dirs = camera.all_pixel_rays((config.t_near, config.t_far))
    n = h * w
    deform = build_deformations(pose, joints, field.num_parts, rest=rest)

    rng = np.random.default_rng(config.seed)
    jc = rng.random((n, config.k_coarse)) if config.jitter else None
    jf = rng.random((n, config.k_fine)) if (config.jitter and config.k_fine > 0) else None

    num_classes = field.num_parts + 1
    color = np.empty((n, 3))
    alpha = np.empty(n)
    seg_prob = np.empty((n, num_classes))
    edges = np.linspace(config.t_near, config.t_far, config.k_coarse + 1)
    for lo in range(0, n, config.chunk_size):
        hi = min(lo + config.chunk_size, n)
        m = hi - lo
        u = jc[lo:hi] if jc is not None else np.full((m, config.k_coarse), 0.5)
        t_c = edges[:-1] + u * np.diff(edges)
        out = composite_articulated(field, origins[lo:hi], dirs[lo:hi], t_c, deform,
                                    config.t_far, config.background, cond=cond)
        if config.k_fine > 0:
            t_all = sample_hierarchical(out.weights, t_c, config.k_fine, None,
                                        config.t_near, config.t_far, jitter=config.jitter,
                                        u=jf[lo:hi] if jf is not None else None)
            out = composite_articulated(fine_field if fine_field is not None else field,
                                        origins[lo:hi], dirs[lo:hi], t_all, deform,
                                        config.t_far, config.background, cond=cond)
        color[lo:hi] = out.color
        alpha[lo:hi] = out.alpha
        seg_prob[lo:hi] = out.seg_prob

    label = np.argmax(seg_prob, axis=-1)
    return RenderResult(color=color.reshape(h, w, 3), label=label.reshape(h, w),
                        alpha=alpha.reshape(h, w),
                        seg_prob=seg_prob.reshape(h, w, num_classes))
