"""Fitting the MLP field to posed RGB + part-segmentation observations.

Each iteration samples a ray batch across instances and views, renders it
through the coarse network, importance-samples the fine network, and
applies one adaptive-moment update on L_color + lambda * L_seg. The whole
backward path (losses -> compositing -> MLP) is hand-rolled; the sampling
locations of the fine pass are treated as constants, as usual for
hierarchical NeRF training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .mlp import RadianceMlp, save_checkpoint
from .rendering import (RenderConfig, composite, composite_backward,
                        sample_hierarchical, softmax)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the iteration and batch identity."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    batch_rays: int = 512
    lambda_seg: float = 4e-2
    lr: float = 5e-4
    lr_decay: float = 0.1          # total multiplier reached at the last iteration
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 25
    checkpoint_every: int = 0      # 0: only at the end

    def __post_init__(self):
        if self.iterations < 1 or self.batch_rays < 1:
            raise ValueError("iterations and batch_rays must be positive")
        if self.lambda_seg < 0:
            raise ValueError("lambda_seg must be nonnegative")


class Adam:
    """Adaptive-moment estimation on a flat parameter vector."""

    def __init__(self, n_params: int, cfg: TrainConfig):
        self.cfg = cfg
        self.m = np.zeros(n_params, dtype=np.float32)
        self.v = np.zeros(n_params, dtype=np.float32)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        self.m = b1 * self.m + (1 - b1) * grads
        self.v = b2 * self.v + (1 - b2) * grads * grads
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.cfg.adam_eps)


def color_loss(pred_coarse: np.ndarray, pred_fine: np.ndarray,
               truth: np.ndarray) -> float:
    """Mean over rays of the summed squared color error of both networks."""
    pred_coarse = np.asarray(pred_coarse, dtype=np.float64)
    pred_fine = np.asarray(pred_fine, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred_coarse.shape != truth.shape or pred_fine.shape != truth.shape:
        raise ValueError("prediction/truth batch shapes differ")
    per_ray = np.sum((pred_coarse - truth) ** 2, axis=-1) \
        + np.sum((pred_fine - truth) ** 2, axis=-1)
    return float(np.mean(per_ray))


def seg_loss(logits_coarse: np.ndarray, logits_fine: np.ndarray,
             labels: np.ndarray) -> float:
    """Mean cross-entropy of both networks' pixel-level label distributions.

    The distributions are softmaxes of the composited logits; labels are
    0-based class indices.
    """
    labels = np.asarray(labels)
    total = 0.0
    for logits in (logits_coarse, logits_fine):
        logits = np.asarray(logits, dtype=np.float64)
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise ValueError("labels out of range for the logit width")
        z = logits - np.max(logits, axis=1, keepdims=True)
        log_p = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
        total += float(np.mean(-log_p[np.arange(len(labels)), labels]))
    return total


@dataclass
class TrainData:
    """Flattened ray supervision pooled over instances and views.

    colors are float32 in [0, 1]; labels are 0-based class indices;
    instance_ids select the conditioning context (if any) per ray.
    """

    origins: np.ndarray        # (N, 3) float32
    dirs: np.ndarray           # (N, 3) float32
    colors: np.ndarray         # (N, 3) float32
    labels: np.ndarray         # (N,) int16
    instance_ids: np.ndarray   # (N,) int16
    contexts: list = field(default_factory=list)   # ConditioningContext per instance

    @staticmethod
    def from_views(images, labels, cameras, bounds, contexts=None) -> "TrainData":
        """Pool (image, label map, camera) triples of one or more instances.

        images / labels / cameras are either flat lists (single instance)
        or lists of lists (one inner list per instance).
        """
        if images and not isinstance(images[0], (list, tuple)):
            images, labels, cameras = [images], [labels], [cameras]
        o_all, d_all, c_all, l_all, ids = [], [], [], [], []
        for inst, (imgs, labs, cams) in enumerate(zip(images, labels, cameras)):
            for img, lab, cam in zip(imgs, labs, cams):
                origins, dirs = cam.all_pixel_rays(bounds)
                o_all.append(origins.astype(np.float32))
                d_all.append(dirs.astype(np.float32))
                c_all.append(np.asarray(img, dtype=np.float32).reshape(-1, 3))
                l_all.append(np.asarray(lab).reshape(-1).astype(np.int16))
                ids.append(np.full(origins.shape[0], inst, dtype=np.int16))
        return TrainData(origins=np.concatenate(o_all), dirs=np.concatenate(d_all),
                         colors=np.concatenate(c_all), labels=np.concatenate(l_all),
                         instance_ids=np.concatenate(ids),
                         contexts=list(contexts) if contexts else [])

    def __len__(self) -> int:
        return len(self.origins)


def _batch_features(data: TrainData, idx: np.ndarray, pts: np.ndarray, k: int):
    """Per-sample conditioning features for a mixed-instance batch."""
    if not data.contexts:
        return None
    feats = np.empty((len(idx) * k, data.contexts[0].feature_dim), dtype=np.float64)
    inst = np.repeat(data.instance_ids[idx], k)
    for i, ctx in enumerate(data.contexts):
        m = inst == i
        if np.any(m):
            feats[m] = ctx.features_at(pts[m])
    return feats


def _render_batch(net: RadianceMlp, data: TrainData, idx: np.ndarray,
                  t: np.ndarray, t_far: float, background: np.ndarray):
    """Forward one network over a batch at given t-values; keep the cache."""
    b, k = t.shape
    o = data.origins[idx]
    d = data.dirs[idx]
    pts = (o[:, None, :].astype(np.float64)
           + t[:, :, None] * d[:, None, :].astype(np.float64)).reshape(-1, 3)
    d_rep = np.repeat(d, k, axis=0)
    feats = _batch_features(data, idx, pts, k)
    vals, cache = net.forward(pts, d_rep, feats)
    rays = composite(t, vals.sigma.reshape(b, k), vals.color.reshape(b, k, 3),
                     vals.logits.reshape(b, k, -1), t_far, background)
    return vals, cache, rays, pts


def _loss_grads_one_net(net, vals, cache, rays, t, t_far, background,
                        truth_c, labels, lam):
    """Loss terms and the flat parameter gradient for one network."""
    b = t.shape[0]
    l_color = float(np.mean(np.sum((rays.color - truth_c) ** 2, axis=-1)))
    d_color_pix = 2.0 * (rays.color - truth_c) / b

    p_hat = softmax(rays.raw_seg)
    onehot = np.zeros_like(p_hat)
    onehot[np.arange(b), labels] = 1.0
    l_seg = float(np.mean(-np.log(np.maximum(p_hat[np.arange(b), labels], 1e-300))))
    d_seg_pix = lam * (p_hat - onehot) / b

    k = t.shape[1]
    ds, dc, dl = composite_backward(
        t, vals.sigma.reshape(b, k), vals.color.reshape(b, k, 3),
        vals.logits.reshape(b, k, -1), t_far, background, d_color_pix, d_seg_pix)
    flat, _ = net.backward(cache, ds.reshape(-1), dc.reshape(-1, 3),
                           dl.reshape(-1, p_hat.shape[1]))
    return l_color, l_seg, flat


def loss_and_grads(coarse: RadianceMlp, fine: RadianceMlp, data: TrainData,
                   idx: np.ndarray, render_cfg: RenderConfig, lam: float,
                   u_coarse: np.ndarray | None = None,
                   u_fine: np.ndarray | None = None):
    """One full forward/backward over a fixed ray batch.

    Returns (L_color, L_seg, grad_coarse, grad_fine, fine-net color MSE).
    Deterministic for fixed inputs; exposed for gradient and descent tests.
    """
    b = len(idx)
    kc, kf = render_cfg.k_coarse, render_cfg.k_fine
    edges = np.linspace(render_cfg.t_near, render_cfg.t_far, kc + 1)
    if u_coarse is None:
        u_coarse = np.full((b, kc), 0.5)
    t_c = edges[:-1] + u_coarse * np.diff(edges)
    truth_c = data.colors[idx].astype(np.float64)
    labels = data.labels[idx].astype(np.int64)
    bg = render_cfg.background

    vals_c, cache_c, rays_c, _ = _render_batch(coarse, data, idx, t_c,
                                               render_cfg.t_far, bg)
    lc_c, ls_c, grad_c = _loss_grads_one_net(coarse, vals_c, cache_c, rays_c, t_c,
                                             render_cfg.t_far, bg, truth_c, labels, lam)

    if kf > 0:
        t_all = sample_hierarchical(rays_c.weights, t_c, kf, None,
                                    render_cfg.t_near, render_cfg.t_far,
                                    jitter=u_fine is not None, u=u_fine)
    else:
        t_all = t_c
    vals_f, cache_f, rays_f, _ = _render_batch(fine, data, idx, t_all,
                                               render_cfg.t_far, bg)
    lc_f, ls_f, grad_f = _loss_grads_one_net(fine, vals_f, cache_f, rays_f, t_all,
                                             render_cfg.t_far, bg, truth_c, labels, lam)

    l_color = lc_c + lc_f
    l_seg = ls_c + ls_f
    fine_mse = lc_f / 3.0
    return l_color, l_seg, grad_c, grad_f, fine_mse


@dataclass
class TrainReport:
    iterations: int
    l_color: np.ndarray
    l_seg: np.ndarray
    l_total: np.ndarray
    psnr_probe: np.ndarray


def train(coarse: RadianceMlp, fine: RadianceMlp, data: TrainData,
          render_cfg: RenderConfig, cfg: TrainConfig,
          log_path=None, checkpoint_path=None) -> TrainReport:
    """Optimize both networks in place; deterministic given cfg.seed."""
    if len(data) == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(cfg.seed)
    opt_c = Adam(coarse.num_params, cfg)
    opt_f = Adam(fine.num_params, cfg)
    seg_on = cfg.lambda_seg > 0 and coarse.seg_head is not None

    hist = {k: np.zeros(cfg.iterations) for k in ("l_color", "l_seg", "l_total", "psnr")}
    log_rows = []
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(data), size=cfg.batch_rays)
        u_c = rng.random((cfg.batch_rays, render_cfg.k_coarse)) if render_cfg.jitter else None
        u_f = (rng.random((cfg.batch_rays, render_cfg.k_fine))
               if render_cfg.jitter and render_cfg.k_fine > 0 else None)
        lam = cfg.lambda_seg if seg_on else 0.0
        l_color, l_seg, g_c, g_f, fine_mse = loss_and_grads(
            coarse, fine, data, idx, render_cfg, lam, u_c, u_f)
        l_total = l_color + lam * l_seg
        if not np.isfinite(l_total):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it} (batch seed {cfg.seed}, "
                f"first ray {int(idx[0])})")

        lr = cfg.lr * cfg.lr_decay ** (it / max(cfg.iterations - 1, 1))
        coarse.set_flat(opt_c.step(coarse.get_flat(), g_c, lr))
        fine.set_flat(opt_f.step(fine.get_flat(), g_f, lr))

        hist["l_color"][it] = l_color
        hist["l_seg"][it] = l_seg
        hist["l_total"][it] = l_total
        hist["psnr"][it] = -10.0 * np.log10(max(fine_mse, 1e-12))
        if log_path is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            log_rows.append([it, l_color, l_seg, l_total, hist["psnr"][it]])
        if checkpoint_path is not None and cfg.checkpoint_every > 0 \
                and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, {"coarse": coarse, "fine": fine})

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, {"coarse": coarse, "fine": fine})
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iter", "l_color", "l_seg", "l_total", "psnr_probe"])
            writer.writerows(log_rows)
    return TrainReport(iterations=cfg.iterations, l_color=hist["l_color"],
                       l_seg=hist["l_seg"], l_total=hist["l_total"],
                       psnr_probe=hist["psnr"])
