"""Image-conditioned features that specialize a field to a seen instance.

Every queried 3D point is projected into each source view, a feature is
bilinearly sampled at the projected pixel, and features from multiple
views are merged by a validity-masked mean. The per-pixel featurizer is
deliberately fixed (identity RGB or a multi-scale Gaussian stack); the
projective sampling machinery is the part that matters here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Camera


@dataclass(frozen=True)
class SourceView:
    """RGB image in [0,1] with the camera that captured it."""

    image: np.ndarray
    camera: Camera

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("source image must be (H, W, 3)")
        if img.shape[0] != self.camera.height or img.shape[1] != self.camera.width:
            raise ValueError(f"image {img.shape[:2]} does not match camera "
                             f"({self.camera.height}, {self.camera.width})")
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class EncoderConfig:
    """Fixed featurizer: raw RGB, or RGB at several Gaussian blur scales."""

    kind: str = "pyramid"
    levels: int = 3

    def __post_init__(self):
        if self.kind not in ("identity", "pyramid"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "pyramid" and self.levels < 1:
            raise ValueError("pyramid needs at least one level")

    @property
    def feature_dim(self) -> int:
        return 3 if self.kind == "identity" else 3 * self.levels


def extract_features(view: SourceView, encoder: EncoderConfig) -> np.ndarray:
    """Per-pixel feature map (H, W, F) at the image's resolution.

    Pyramid level k is the RGB image blurred at sigma = 2^k pixels
    (level 0 is the unblurred image), channel-concatenated.
    """
    img = view.image
    if encoder.kind == "identity":
        return img.copy()
    levels = [img]
    for k in range(1, encoder.levels):
        sigma = float(2 ** k)
        levels.append(gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest"))
    return np.concatenate(levels, axis=-1)


def bilinear_sample(fmap: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample (H, W, F) at continuous pixel coords (N, 2), border-clamped.

    Integer coordinates address pixel centers.
    """
    h, w = fmap.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(u), np.int64)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(v), np.int64)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    top = (1 - fu) * fmap[v0, u0] + fu * fmap[v0, u0 + 1]
    bot = (1 - fu) * fmap[v0 + 1, u0] + fu * fmap[v0 + 1, u0 + 1]
    return (1 - fv) * top + fv * bot


def sample_feature(fmap: np.ndarray, camera: Camera, x: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Project points into the view and sample its feature map.

    Returns ((N, F) features, (N,) validity). Points behind the camera or
    projecting outside the frustum get a zero vector and validity False.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    uv, ok = camera.project_valid(x)
    feats = np.zeros((x.shape[0], fmap.shape[2]))
    if np.any(ok):
        feats[ok] = bilinear_sample(fmap, uv[ok])
    return feats, ok


def aggregate_views(features: list[np.ndarray], valid: list[np.ndarray]) -> np.ndarray:
    """Validity-masked mean across views; zero where no view sees the point."""
    if not features:
        raise ValueError("need at least one source view")
    stack = np.stack(features)            # (V, N, F)
    mask = np.stack(valid).astype(np.float64)[:, :, None]
    count = mask.sum(axis=0)
    total = (stack * mask).sum(axis=0)
    return np.where(count > 0, total / np.where(count > 0, count, 1.0), 0.0)


class ConditioningContext:
    """Precomputed source-view feature maps, queryable at world points."""

    def __init__(self, views: list[SourceView], encoder: EncoderConfig | None = None):
        if not views:
            raise ValueError("need at least one source view")
        self.encoder = encoder if encoder is not None else EncoderConfig()
        self.views = list(views)
        self.feature_maps = [extract_features(v, self.encoder) for v in views]

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    def features_at(self, x: np.ndarray) -> np.ndarray:
        """Aggregated conditioning features (N, F) for world points (N, 3)."""
        feats, valid = [], []
        for fmap, view in zip(self.feature_maps, self.views):
            f, ok = sample_feature(fmap, view.camera, x)
            feats.append(f)
            valid.append(ok)
        return aggregate_views(feats, valid)
