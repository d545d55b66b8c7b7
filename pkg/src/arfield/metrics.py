"""Image, segmentation, and joint/pose evaluation metrics.

All image metrics expect float arrays in [0, 1]. Segmentation metrics work
on 0-based class indices (parts 0..P-1, background P). LPIPS is
deliberately absent: it needs pretrained perceptual weights, and reports
mark the column as unavailable rather than zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP_DB = 99.0

# standard SSIM constants for unit dynamic range
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 window


@dataclass
class ImageMetrics:
    mse: float
    psnr_db: float
    ssim: float


@dataclass
class SegMetrics:
    pixel_accuracy: float
    miou: float


@dataclass
class PoseMetrics:
    a_error_rad: float
    a_error_deg: float
    u_error_rad: float
    v_error: float


def mse_to_psnr(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP_DB
    return float(min(-10.0 * np.log10(mse), PSNR_CAP_DB))


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    blur = dict(sigma=_SSIM_SIGMA, truncate=_SSIM_RADIUS / _SSIM_SIGMA, mode="reflect")
    mu_a = gaussian_filter(a, **blur)
    mu_b = gaussian_filter(b, **blur)
    var_a = gaussian_filter(a * a, **blur) - mu_a ** 2
    var_b = gaussian_filter(b * b, **blur) - mu_b ** 2
    cov = gaussian_filter(a * b, **blur) - mu_a * mu_b
    c1, c2 = _SSIM_K1 ** 2, _SSIM_K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def image_metrics(pred: np.ndarray, truth: np.ndarray) -> ImageMetrics:
    """MSE over all channels, PSNR (capped at 99 dB), channel-mean SSIM."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {truth.shape}")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        truth = truth[:, :, None]
    mse = float(np.mean((pred - truth) ** 2))
    ssim = float(np.mean([_ssim_channel(pred[:, :, c], truth[:, :, c])
                          for c in range(pred.shape[2])]))
    return ImageMetrics(mse=mse, psnr_db=mse_to_psnr(mse), ssim=ssim)


def seg_metrics(pred: np.ndarray, truth: np.ndarray, num_parts: int) -> SegMetrics:
    """Pixel accuracy and mean IoU over the classes present in the truth."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"label shapes differ: {pred.shape} vs {truth.shape}")
    if truth.min() < 0 or truth.max() > num_parts:
        raise ValueError("truth labels out of range for the given part count")
    acc = float(np.mean(pred == truth))
    ious = []
    for c in range(num_parts + 1):
        in_truth = truth == c
        if not np.any(in_truth):
            continue
        in_pred = pred == c
        union = np.sum(in_truth | in_pred)
        ious.append(np.sum(in_truth & in_pred) / union if union else 1.0)
    return SegMetrics(pixel_accuracy=acc, miou=float(np.mean(ious)))


def axis_angle_error(u_est: np.ndarray, u_true: np.ndarray) -> float:
    """Angle between axis directions, invariant to sign flips (radians)."""
    u1 = np.asarray(u_est, dtype=np.float64)
    u2 = np.asarray(u_true, dtype=np.float64)
    u1 = u1 / np.linalg.norm(u1)
    u2 = u2 / np.linalg.norm(u2)
    return float(np.arccos(np.clip(abs(np.dot(u1, u2)), 0.0, 1.0)))


def line_distance(u1: np.ndarray, v1: np.ndarray, u2: np.ndarray, v2: np.ndarray) -> float:
    """Minimum distance between the infinite lines v + s*u."""
    u1 = np.asarray(u1, dtype=np.float64) / np.linalg.norm(u1)
    u2 = np.asarray(u2, dtype=np.float64) / np.linalg.norm(u2)
    dv = np.asarray(v2, dtype=np.float64) - np.asarray(v1, dtype=np.float64)
    cross = np.cross(u1, u2)
    n = np.linalg.norm(cross)
    if n < 1e-9:  # parallel: perpendicular offset of the connecting vector
        return float(np.linalg.norm(dv - np.dot(dv, u1) * u1))
    return float(abs(np.dot(dv, cross)) / n)


def pose_metrics(a_est: float, a_true: float, joint_est=None, joint_true=None
                 ) -> PoseMetrics:
    """Angle error plus joint axis/pivot errors when both joints are given.

    a_est / a_true are radians. u_error is arccos(|u_est . u_true|); v_error
    is the line-to-line distance, which is invariant to where on the axis
    either pivot was parameterized.
    """
    a_err = abs(float(a_est) - float(a_true))
    u_err = 0.0
    v_err = 0.0
    if joint_est is not None and joint_true is not None:
        u_err = axis_angle_error(joint_est.axis, joint_true.axis)
        v_err = line_distance(joint_est.axis, joint_est.pivot,
                              joint_true.axis, joint_true.pivot)
    return PoseMetrics(a_error_rad=a_err, a_error_deg=float(np.degrees(a_err)),
                       u_error_rad=u_err, v_error=v_err)


def report_dict(*metric_objs) -> dict:
    """Merge metric dataclasses into one JSON-ready report."""
    out: dict = {"lpips": None}  # unavailable by design, marked absent
    for m in metric_objs:
        if m is not None:
            out.update(asdict(m))
    return out
