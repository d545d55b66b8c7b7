"""Quadrature volume rendering of color and part segmentation along rays.

Field evaluation may run in 32-bit, but everything accumulated along a ray
(optical depth, transmittance, weighted sums) runs in 64-bit: transmittance
products underflow in 32-bit on long dense rays.

The per-sample weighted terms are deliberately grouped as T * (absorb * value)
and routed through `_finish_rays`, which the articulation module reuses; with
identity deformations the articulated path then reproduces this module's
output bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BLACK = np.zeros(3)


@dataclass(frozen=True)
class RenderConfig:
    """Sampling and compositing parameters for one render."""

    t_near: float
    t_far: float
    k_coarse: int = 64
    k_fine: int = 0
    jitter: bool = True
    background: np.ndarray = field(default_factory=lambda: BLACK.copy())
    seed: int = 0
    chunk_size: int = 4096

    def __post_init__(self):
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("require 0 <= t_near < t_far")
        if self.k_coarse < 2:
            raise ValueError("k_coarse must be at least 2")
        if self.k_fine < 0 or self.chunk_size < 1:
            raise ValueError("bad k_fine or chunk_size")
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (3,):
            raise ValueError("background must be an RGB triple")
        object.__setattr__(self, "background", bg)


@dataclass
class RenderedRays:
    """Per-ray compositing results (batch of n rays, C = P+1 classes)."""

    color: np.ndarray        # (n, 3) in [0, 1]
    seg_prob: np.ndarray     # (n, C), rows sum to 1; background-blended
    alpha: np.ndarray        # (n,) accumulated opacity
    raw_seg: np.ndarray      # (n, C) composited logits, no background blend
    weights: np.ndarray      # (n, K) quadrature weights, hierarchical guidance

    @property
    def label(self) -> np.ndarray:
        """Argmax class index per ray (0..P-1 parts, P background)."""
        return np.argmax(self.seg_prob, axis=-1)


@dataclass
class RenderResult:
    """Full-image render: color, class-index labels, opacity."""

    color: np.ndarray   # (H, W, 3)
    label: np.ndarray   # (H, W) int, 0..P-1 parts, P background
    alpha: np.ndarray   # (H, W)
    seg_prob: np.ndarray  # (H, W, C)


def sample_stratified(config: RenderConfig, rng: np.random.Generator | None,
                      n_rays: int = 1) -> np.ndarray:
    """(n_rays, k_coarse) t-values, one per equal-width bin of [t_near, t_far].

    With jitter each value is drawn uniformly inside its bin; without, bin
    midpoints are returned (rng may then be None).
    """
    k = config.k_coarse
    edges = np.linspace(config.t_near, config.t_far, k + 1)
    lo, width = edges[:-1], np.diff(edges)
    if config.jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        u = rng.random((n_rays, k))
    else:
        u = np.full((n_rays, k), 0.5)
    return lo + u * width


def sample_hierarchical(weights: np.ndarray, t_coarse: np.ndarray, k_fine: int,
                        rng: np.random.Generator | None, t_near: float,
                        t_far: float, jitter: bool = True,
                        u: np.ndarray | None = None) -> np.ndarray:
    """Importance-sample k_fine extra t-values and merge them with t_coarse.

    Draws come from the inverse CDF of the piecewise-constant density
    proportional to `weights` over bins centered on the coarse t-values
    (bin edges at midpoints, extended to t_near / t_far). Rays whose
    weights sum to zero fall back to a uniform density. Output is sorted
    ascending, shape (n, K + k_fine). Precomputed uniforms may be passed
    via `u` (n, k_fine) to fix the stream independently of chunking.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    t_coarse = np.atleast_2d(np.asarray(t_coarse, dtype=np.float64))
    if weights.shape != t_coarse.shape:
        raise ValueError("weights and t_coarse must have matching shapes")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    n, k = weights.shape

    mids = 0.5 * (t_coarse[:, 1:] + t_coarse[:, :-1])
    edges = np.concatenate([np.full((n, 1), t_near), mids, np.full((n, 1), t_far)], axis=1)

    w = weights.copy()
    dead = w.sum(axis=1) <= 0.0
    if np.any(dead):
        # uniform fallback: constant density means mass proportional to width
        w[dead] = np.diff(edges[dead], axis=1)
    cdf = np.cumsum(w, axis=1)
    cdf = np.concatenate([np.zeros((n, 1)), cdf / cdf[:, -1:]], axis=1)

    if u is not None:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (n, k_fine):
            raise ValueError("precomputed uniforms have the wrong shape")
    elif jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        u = rng.random((n, k_fine))
    else:
        u = (np.arange(k_fine) + 0.5)[None, :] / k_fine * np.ones((n, 1))

    # vectorized per-row searchsorted: give each row a disjoint value range
    shift = 2.0 * np.arange(n)[:, None]
    idx = np.searchsorted((cdf + shift).ravel(), (u + shift).ravel(), side="right")
    idx = idx.reshape(n, k_fine) - np.arange(n)[:, None] * (k + 1)
    b = np.clip(idx - 1, 0, k - 1)

    rows = np.arange(n)[:, None]
    c_lo, c_hi = cdf[rows, b], cdf[rows, b + 1]
    e_lo, e_hi = edges[rows, b], edges[rows, b + 1]
    denom = np.where(c_hi - c_lo > 1e-12, c_hi - c_lo, 1.0)
    t_new = e_lo + (u - c_lo) / denom * (e_hi - e_lo)

    return np.sort(np.concatenate([t_coarse, t_new], axis=1), axis=1)


def _deltas(t_vals: np.ndarray, t_far: float) -> np.ndarray:
    """Interval widths; the last interval closes at t_far."""
    last = np.maximum(t_far - t_vals[:, -1:], 0.0)
    return np.concatenate([np.diff(t_vals, axis=1), last], axis=1)


def _transmittance(tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(T_k, residual T) from per-interval optical depths tau = sigma * delta."""
    cs = np.cumsum(tau, axis=1)
    return np.exp(-(cs - tau)), np.exp(-cs[:, -1])


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _finish_rays(tau: np.ndarray, sample_color: np.ndarray, sample_logits: np.ndarray,
                 background: np.ndarray, num_classes: int) -> RenderedRays:
    """Shared tail of plain and articulated compositing.

    tau: (n, K) per-interval optical depth; sample_color / sample_logits are
    the per-sample absorbed terms (absorb * value), already weighted by
    everything except transmittance.
    """
    t_vis, t_res = _transmittance(tau)
    color = np.sum(t_vis[:, :, None] * sample_color, axis=1) + t_res[:, None] * background
    raw_seg = np.sum(t_vis[:, :, None] * sample_logits, axis=1)
    alpha = 1.0 - t_res
    prob = softmax(raw_seg)
    bg_onehot = np.zeros(num_classes)
    bg_onehot[num_classes - 1] = 1.0
    seg_prob = alpha[:, None] * prob + t_res[:, None] * bg_onehot
    weights = t_vis * (1.0 - np.exp(-tau))
    return RenderedRays(color=color, seg_prob=seg_prob, alpha=alpha,
                        raw_seg=raw_seg, weights=weights)


def composite(t_vals: np.ndarray, sigma: np.ndarray, color: np.ndarray,
              logits: np.ndarray, t_far: float,
              background: np.ndarray = BLACK) -> RenderedRays:
    """Quadrature compositing of color and segmentation logits along rays.

    t_vals (n, K) must be sorted ascending per ray. Residual transmittance
    shades the background color and blends the background class into the
    pixel segmentation distribution.
    """
    t_vals = np.atleast_2d(np.asarray(t_vals, dtype=np.float64))
    if np.any(np.diff(t_vals, axis=1) < 0):
        raise ValueError("t_vals must be sorted ascending along each ray")
    sigma = np.asarray(sigma, dtype=np.float64).reshape(t_vals.shape)
    n, k = t_vals.shape
    color = np.asarray(color, dtype=np.float64).reshape(n, k, 3)
    logits = np.asarray(logits, dtype=np.float64).reshape(n, k, -1)
    background = np.asarray(background, dtype=np.float64)

    delta = _deltas(t_vals, t_far)
    tau = sigma * delta
    absorb = 1.0 - np.exp(-tau)
    return _finish_rays(tau, absorb[:, :, None] * color, absorb[:, :, None] * logits,
                        background, logits.shape[-1])


def composite_backward(t_vals: np.ndarray, sigma: np.ndarray, color: np.ndarray,
                       logits: np.ndarray, t_far: float, background: np.ndarray,
                       d_color: np.ndarray, d_raw_seg: np.ndarray,
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of composite() outputs w.r.t. per-sample field values.

    d_color is the upstream gradient on the composited color (n, 3) and
    d_raw_seg on the composited raw logits (n, C). Returns (d_sigma,
    d_color_samples, d_logits_samples) matching the input sample shapes.
    """
    t_vals = np.atleast_2d(np.asarray(t_vals, dtype=np.float64))
    sigma = np.asarray(sigma, dtype=np.float64).reshape(t_vals.shape)
    n, k = t_vals.shape
    color = np.asarray(color, dtype=np.float64).reshape(n, k, 3)
    logits = np.asarray(logits, dtype=np.float64).reshape(n, k, -1)
    background = np.asarray(background, dtype=np.float64)
    d_color = np.asarray(d_color, dtype=np.float64).reshape(n, 3)
    d_raw_seg = np.asarray(d_raw_seg, dtype=np.float64).reshape(n, -1)

    delta = _deltas(t_vals, t_far)
    tau = sigma * delta
    t_vis, t_res = _transmittance(tau)
    decay = np.exp(-tau)
    absorb = 1.0 - decay

    # per-sample scalar g_k = dL/d(absorbed value) . value
    g = (np.einsum("nc,nkc->nk", d_color, color)
         + np.einsum("nc,nkc->nk", d_raw_seg, logits))
    q = t_vis * absorb * g
    suffix = np.cumsum(q[:, ::-1], axis=1)[:, ::-1] - q  # sum over j > k
    d_tau = t_vis * decay * g - suffix - (t_res * (d_color @ background))[:, None]
    d_sigma = d_tau * delta

    w = (t_vis * absorb)[:, :, None]
    return d_sigma, w * d_color[:, None, :], w * d_raw_seg[:, None, :]


def _conditioning_features(cond, points: np.ndarray):
    return None if cond is None else cond.features_at(points)


def render_rays(field, origins: np.ndarray, dirs: np.ndarray, config: RenderConfig,
                cond=None, fine_field=None,
                rng: np.random.Generator | None = None,
                jitter_coarse: np.ndarray | None = None,
                jitter_fine: np.ndarray | None = None) -> RenderedRays:
    """Render a batch of rays with optional hierarchical refinement.

    Jitter may be supplied precomputed (n, K) in [0,1) so callers can fix
    the random stream independently of chunking; otherwise it is drawn from
    `rng` (or midpoints are used when config.jitter is off).
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = origins.shape[0]
    k = config.k_coarse

    edges = np.linspace(config.t_near, config.t_far, k + 1)
    if config.jitter:
        u = jitter_coarse if jitter_coarse is not None else rng.random((n, k))
    else:
        u = np.full((n, k), 0.5)
    t_c = edges[:-1] + u * np.diff(edges)

    coarse = _composite_at(field, origins, dirs, t_c, config, cond)
    if config.k_fine <= 0:
        return coarse

    if config.jitter:
        uf = jitter_fine if jitter_fine is not None else rng.random((n, config.k_fine))
    else:
        uf = None
    t_all = sample_hierarchical(coarse.weights, t_c, config.k_fine, None,
                                config.t_near, config.t_far, jitter=config.jitter, u=uf)
    return _composite_at(fine_field if fine_field is not None else field,
                         origins, dirs, t_all, config, cond)


def _composite_at(field, origins, dirs, t_vals, config: RenderConfig, cond) -> RenderedRays:
    n, k = t_vals.shape
    pts = (origins[:, None, :] + t_vals[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    d_rep = np.repeat(dirs, k, axis=0)
    feats = _conditioning_features(cond, pts)
    vals = field.evaluate(pts, d_rep, feats)
    return composite(t_vals, vals.sigma.reshape(n, k), vals.color.reshape(n, k, 3),
                     vals.logits.reshape(n, k, -1), config.t_far, config.background)


def render_image(field, camera, config: RenderConfig, cond=None,
                 fine_field=None) -> RenderResult:
    """Render every pixel of `camera`. Deterministic given config.seed.

    All jitter is drawn up front in pixel order from a generator seeded with
    config.seed, so the chunked evaluation schedule cannot change output.
    """
    h, w = camera.height, camera.width
    origins, dirs = camera.all_pixel_rays((config.t_near, config.t_far))
    n = h * w
    rng = np.random.default_rng(config.seed)
    jc = rng.random((n, config.k_coarse)) if config.jitter else None
    jf = rng.random((n, config.k_fine)) if (config.jitter and config.k_fine > 0) else None

    color = np.empty((n, 3))
    alpha = np.empty(n)
    num_classes = field.num_parts + 1
    seg_prob = np.empty((n, num_classes))
    for lo in range(0, n, config.chunk_size):
        hi = min(lo + config.chunk_size, n)
        out = render_rays(field, origins[lo:hi], dirs[lo:hi], config, cond=cond,
                          fine_field=fine_field,
                          jitter_coarse=None if jc is None else jc[lo:hi],
                          jitter_fine=None if jf is None else jf[lo:hi])
        color[lo:hi] = out.color
        alpha[lo:hi] = out.alpha
        seg_prob[lo:hi] = out.seg_prob

    label = np.argmax(seg_prob, axis=-1)
    return RenderResult(color=color.reshape(h, w, 3), label=label.reshape(h, w),
                        alpha=alpha.reshape(h, w),
                        seg_prob=seg_prob.reshape(h, w, num_classes))
