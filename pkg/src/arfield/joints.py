"""Revolute-joint inference from the segmentation field.

Rays are marched through the field; sample points where the argmax part
label flips between consecutive samples (both labels being actual parts)
while the density clears a threshold are pooled as boundary points, and a
3D line is fit to them by total least squares. Transitions into or out of
the background class are not joint evidence: a revolute joint lives on the
intersection of two parts, while part/background flips trace every exit
surface of the object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .articulation import JointAttributes
from .rendering import RenderConfig, sample_stratified


class NoBoundaryError(RuntimeError):
    """No part-to-part boundary points found (closed or degenerate config)."""


class AmbiguousAxisError(RuntimeError):
    """Boundary points spread over a surface, not a line; axis ill-defined."""


class DegeneratePointsError(ValueError):
    """Fewer than two distinct points were supplied to the line fit."""


@dataclass
class IntersectionSet:
    """Pooled world-frame boundary points with their source pixels."""

    points: np.ndarray      # (N, 3)
    pixel_ids: np.ndarray   # (N, 2): camera index, flat pixel index
    threshold: float        # density threshold actually applied

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class JointEstimate:
    """Fitted joint attributes with fit quality."""

    attrs: JointAttributes
    inliers: int
    residual: float         # RMS point-to-line distance, scene units


def collect_intersections(field, cameras, config: RenderConfig,
                          threshold: float | None = None, cond=None
                          ) -> IntersectionSet:
    """Gather candidate joint points from every pixel ray of every camera.

    A sample x_k qualifies when argmax labels of samples k and k+1 name two
    different parts and sigma_k >= threshold. The default threshold is half
    the maximum density observed during collection.
    """
    if threshold is not None and threshold <= 0:
        raise ValueError("density threshold must be positive")
    cameras = list(cameras)
    if not cameras:
        raise ValueError("need at least one camera")
    num_parts = field.num_parts

    per_cam = []
    max_sigma = 0.0
    rng = np.random.default_rng(config.seed)
    for cam in cameras:
        origins, dirs = cam.all_pixel_rays((config.t_near, config.t_far))
        n = origins.shape[0]
        t = sample_stratified(config, rng, n_rays=n)
        k = t.shape[1]
        sig = np.empty((n, k))
        lab = np.empty((n, k), dtype=np.int64)
        for lo in range(0, n, config.chunk_size):
            hi = min(lo + config.chunk_size, n)
            m = hi - lo
            pts = (origins[lo:hi, None, :] + t[lo:hi, :, None] * dirs[lo:hi, None, :])
            feats = None if cond is None else cond.features_at(pts.reshape(-1, 3))
            vals = field.evaluate(pts.reshape(-1, 3), np.repeat(dirs[lo:hi], k, axis=0),
                                  feats)
            sig[lo:hi] = np.asarray(vals.sigma, dtype=np.float64).reshape(m, k)
            lab[lo:hi] = np.argmax(vals.logits, axis=-1).reshape(m, k)
        per_cam.append((origins, dirs, t, sig, lab))
        if sig.size:
            max_sigma = max(max_sigma, float(sig.max()))

    h = threshold if threshold is not None else 0.5 * max_sigma
    points, ids = [], []
    for cam_idx, (origins, dirs, t, sig, lab) in enumerate(per_cam):
        flip = lab[:, :-1] != lab[:, 1:]
        both_parts = (lab[:, :-1] < num_parts) & (lab[:, 1:] < num_parts)
        dense = sig[:, :-1] >= h
        keep = flip & both_parts & dense
        ray_idx, k_idx = np.nonzero(keep)
        if len(ray_idx):
            tk = t[ray_idx, k_idx]
            points.append(origins[ray_idx] + tk[:, None] * dirs[ray_idx])
            ids.append(np.stack([np.full(len(ray_idx), cam_idx), ray_idx], axis=1))

    if not points:
        raise NoBoundaryError(
            "no part-to-part boundary points above the density threshold; "
            "the articulation may be closed or the field single-part")
    return IntersectionSet(points=np.concatenate(points),
                           pixel_ids=np.concatenate(ids), threshold=h)


def _tls_line(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(centroid, unit direction, eigenvalues desc) of the point cloud."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    u = evecs[:, order[0]]
    return centroid, u, evals


def _point_line_distances(points, centroid, u) -> np.ndarray:
    rel = points - centroid
    along = rel @ u
    return np.linalg.norm(rel - along[:, None] * u[None, :], axis=1)


def canonical_axis_sign(u: np.ndarray) -> np.ndarray:
    """Flip so the largest-magnitude component is positive."""
    i = int(np.argmax(np.abs(u)))
    return -u if u[i] < 0 else u


def fit_line(points: np.ndarray, trim_fraction: float = 0.1,
             axis_ratio_min: float = 20.0, child_part: int = 2) -> JointEstimate:
    """Total-least-squares 3D line through boundary points.

    The direction is the principal axis of the centered covariance (robust
    to axes parallel to coordinate planes, unlike coordinate regression).
    One round of trimming drops the trim_fraction of points farthest from
    the first-pass line. An axis is only accepted when the top covariance
    eigenvalue dominates the second by axis_ratio_min; otherwise the points
    spread over a surface rather than a line and AmbiguousAxisError is
    raised. A genuine hinge line scores ratios in the thousands, while a
    flush contact face scores (aspect ratio)^2, single digits, so the
    default threshold separates the regimes by orders of magnitude.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 2 or len(np.unique(points, axis=0)) < 2:
        raise DegeneratePointsError("need at least two distinct points")

    centroid, u, _ = _tls_line(points)
    kept = points
    if trim_fraction > 0 and len(points) >= 3:
        dist = _point_line_distances(points, centroid, u)
        n_drop = int(np.ceil(trim_fraction * len(points)))
        keep_idx = np.argsort(dist)[:len(points) - n_drop]
        if len(keep_idx) >= 2 and len(np.unique(points[keep_idx], axis=0)) >= 2:
            kept = points[keep_idx]

    centroid, u, evals = _tls_line(kept)
    if evals[0] < 1e-24:
        raise DegeneratePointsError("points are numerically coincident")
    ratio = evals[0] / max(evals[1], 1e-300)
    if ratio < axis_ratio_min:
        raise AmbiguousAxisError(
            f"no dominant direction (eigenvalue ratio {ratio:.3f} < {axis_ratio_min}); "
            "boundary points form a surface")

    u = canonical_axis_sign(u)
    residual = float(np.sqrt(np.mean(_point_line_distances(kept, centroid, u) ** 2)))
    attrs = JointAttributes(axis=u, pivot=centroid, child_part=child_part)
    return JointEstimate(attrs=attrs, inliers=len(kept), residual=residual)


def estimate_joint(field, cameras, config: RenderConfig,
                   threshold: float | None = None, cond=None,
                   trim_fraction: float = 0.1, child_part: int = 2
                   ) -> JointEstimate:
    """collect_intersections + trimmed fit_line, with errors propagated."""
    found = collect_intersections(field, cameras, config, threshold=threshold, cond=cond)
    return fit_line(found.points, trim_fraction=trim_fraction, child_part=child_part)


def orient_axis_like(attrs: JointAttributes, reference_axis: np.ndarray) -> JointAttributes:
    """Flip the (sign-ambiguous) fitted axis to align with a reference.

    A fitted line fixes the axis only up to sign, but the sign decides
    which rotation direction a positive angle means; callers that know the
    scene's convention can resolve it here.
    """
    ref = np.asarray(reference_axis, dtype=np.float64)
    if float(np.dot(attrs.axis, ref)) < 0:
        return JointAttributes(-attrs.axis, attrs.pivot, attrs.child_part)
    return attrs
