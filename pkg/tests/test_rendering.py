import numpy as np
import pytest
from scipy.spatial import ConvexHull
from scipy.stats import chisquare

from arfield.fields import FieldValues, ProceduralField, RadianceField
from arfield.geometry import look_at_camera, vec3
from arfield.rendering import (RenderConfig, composite, composite_backward,
                               render_image, sample_hierarchical,
                               sample_stratified, _transmittance)
from arfield.scenes import Box, ProceduralScene


class SlabField(RadianceField):
    """Constant density inside z in [z0, z1], gray color, one part."""

    num_parts = 1

    def __init__(self, density=1.0, z0=0.0, z1=1.0):
        self.density, self.z0, self.z1 = density, z0, z1

    def evaluate(self, x, d, cond=None):
        self._check_cond(x.shape[0], cond)
        inside = (x[:, 2] >= self.z0) & (x[:, 2] <= self.z1)
        sigma = np.where(inside, self.density, 0.0)
        color = np.tile([0.5, 0.5, 0.5], (x.shape[0], 1))
        logits = np.zeros((x.shape[0], 2))
        logits[inside, 0] = 10.0
        logits[~inside, 1] = 10.0
        return FieldValues(sigma, color, logits)


class GaussianBlobField(RadianceField):
    """Smooth density exp(-|x|^2 / 2s^2) for refinement-consistency tests."""

    num_parts = 1

    def __init__(self, scale=0.5, peak=3.0):
        self.scale, self.peak = scale, peak

    def evaluate(self, x, d, cond=None):
        sigma = self.peak * np.exp(-np.sum(x ** 2, axis=1) / (2 * self.scale ** 2))
        color = np.tile([0.8, 0.2, 0.1], (x.shape[0], 1))
        return FieldValues(sigma, color, np.zeros((x.shape[0], 2)))


class EmptyField(RadianceField):
    num_parts = 1

    def evaluate(self, x, d, cond=None):
        logits = np.zeros((x.shape[0], 2))
        logits[:, 1] = 10.0
        return FieldValues(np.zeros(x.shape[0]), np.zeros((x.shape[0], 3)), logits)


def cfg(**kw):
    base = dict(t_near=0.0, t_far=1.0, k_coarse=4, jitter=False)
    base.update(kw)
    return RenderConfig(**base)


def test_stratified_midpoints_without_jitter():
    t = sample_stratified(cfg(k_coarse=4), None, n_rays=1)
    assert np.allclose(t, [[0.125, 0.375, 0.625, 0.875]])


def test_stratified_samples_stay_in_bounds():
    rng = np.random.default_rng(0)
    t = sample_stratified(cfg(k_coarse=8, jitter=True, t_near=0.5, t_far=2.0), rng,
                          n_rays=1250)
    assert t.shape == (1250, 8)
    assert np.all(t >= 0.5) and np.all(t <= 2.0)
    assert np.all(np.diff(t, axis=1) > 0)


def test_stratified_uniform_chi_square():
    rng = np.random.default_rng(1)
    k = 10
    t = sample_stratified(cfg(k_coarse=k, jitter=True), rng, n_rays=10_000)
    counts, _ = np.histogram(t.ravel(), bins=4 * k, range=(0.0, 1.0))
    assert chisquare(counts).pvalue > 0.01


def test_hierarchical_single_hot_bin():
    t_c = np.array([[0.125, 0.375, 0.625, 0.875]])
    w = np.array([[0.0, 1.0, 0.0, 0.0]])
    rng = np.random.default_rng(2)
    t = sample_hierarchical(w, t_c, 64, rng, 0.0, 1.0)
    fine = np.setdiff1d(t[0], t_c[0])
    # bin 1 spans the midpoints around t=0.375
    assert np.all(fine >= 0.25) and np.all(fine <= 0.5)


def test_hierarchical_uniform_weights_chi_square():
    k = 8
    t_c = sample_stratified(cfg(k_coarse=k), None, n_rays=1)
    w = np.ones((1, k))
    rng = np.random.default_rng(3)
    draws = []
    t_rep = np.repeat(t_c, 1000, axis=0)
    out = sample_hierarchical(np.ones((1000, k)), t_rep, 100, rng, 0.0, 1.0)
    for row, base in zip(out, t_rep):
        draws.append(np.setdiff1d(row, base))
    draws = np.concatenate(draws)
    counts, _ = np.histogram(draws, bins=20, range=(0.0, 1.0))
    assert chisquare(counts).pvalue > 0.01


def test_hierarchical_output_sorted_and_zero_weight_fallback():
    rng = np.random.default_rng(4)
    t_c = sample_stratified(cfg(k_coarse=6, jitter=True), rng, n_rays=50)
    w = np.zeros((50, 6))
    t = sample_hierarchical(w, t_c, 20, rng, 0.0, 1.0)
    assert t.shape == (50, 26)
    assert np.all(np.diff(t, axis=1) >= 0)
    assert np.all(t >= 0.0) and np.all(t <= 1.0)


def test_composite_empty_ray_is_background():
    bg = np.array([0.2, 0.4, 0.6])
    out = composite(np.array([[0.25, 0.5, 0.75]]), np.zeros((1, 3)),
                    np.zeros((1, 3, 3)), np.zeros((1, 3, 2)), 1.0, bg)
    assert np.array_equal(out.color[0], bg)
    assert out.alpha[0] == 0.0
    assert np.array_equal(out.seg_prob[0], [0.0, 1.0])


def test_composite_single_sample_analytic_alpha():
    # sigma * delta = ln 2 -> alpha = 0.5
    delta = 0.3
    sigma = np.log(2.0) / delta
    out = composite(np.array([[1.0]]), np.array([[sigma]]),
                    np.array([[[1.0, 0.0, 0.0]]]), np.zeros((1, 1, 2)),
                    1.0 + delta, np.zeros(3))
    assert np.allclose(out.color[0], [0.5, 0.0, 0.0], atol=1e-12)
    assert np.isclose(out.alpha[0], 0.5, atol=1e-12)


def test_composite_slab_against_closed_form():
    field = SlabField(density=1.0)
    k = 4096
    config = cfg(k_coarse=k, t_near=0.0, t_far=2.0)
    t = sample_stratified(config, None, n_rays=1)
    origins = np.array([[0.0, 0.0, -0.5]])
    dirs = np.array([[0.0, 0.0, 1.0]])
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    vals = field.evaluate(pts.reshape(-1, 3), np.repeat(dirs, k, axis=0))
    out = composite(t, vals.sigma.reshape(1, k), vals.color.reshape(1, k, 3),
                    vals.logits.reshape(1, k, 2), 2.0)
    assert abs(out.alpha[0] - (1.0 - np.exp(-1.0))) < 1e-3


def test_composite_rejects_unsorted_t():
    with pytest.raises(ValueError):
        composite(np.array([[0.5, 0.2]]), np.zeros((1, 2)), np.zeros((1, 2, 3)),
                  np.zeros((1, 2, 2)), 1.0)


def test_transmittance_monotone_nonincreasing():
    rng = np.random.default_rng(6)
    tau = rng.uniform(0, 0.5, size=(100, 32))
    t_vis, t_res = _transmittance(tau)
    assert np.all(np.diff(t_vis, axis=1) <= 1e-15)
    assert np.all(t_res <= t_vis[:, -1] + 1e-15)


def test_composited_color_in_convex_hull_of_inputs():
    rng = np.random.default_rng(7)
    n, k = 200, 16
    t = np.sort(rng.uniform(0, 1, size=(n, k)), axis=1)
    sigma = rng.uniform(0, 5, size=(n, k))
    color = rng.uniform(0, 1, size=(n, k, 3))
    logits = rng.normal(size=(n, k, 3))
    bg = np.array([0.1, 0.9, 0.3])
    out = composite(t, sigma, color, logits, 1.0, bg)
    lo = np.minimum(color.min(axis=1), bg)
    hi = np.maximum(color.max(axis=1), bg)
    assert np.all(out.color >= lo - 1e-12) and np.all(out.color <= hi + 1e-12)
    assert np.allclose(out.seg_prob.sum(axis=1), 1.0, atol=1e-6)


def test_refinement_consistency_on_smooth_field():
    field = GaussianBlobField()
    rng = np.random.default_rng(8)
    n = 100
    origins = rng.normal(size=(n, 3))
    origins = 2.0 * origins / np.linalg.norm(origins, axis=1, keepdims=True)
    dirs = -origins / np.linalg.norm(origins, axis=1, keepdims=True)
    gaps = []
    alphas = {}
    for k in (16, 32, 64):
        t = sample_stratified(cfg(k_coarse=k, t_near=0.5, t_far=3.5), None, n_rays=n)
        pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
        vals = field.evaluate(pts.reshape(-1, 3), np.repeat(dirs, k, axis=0))
        out = composite(t, vals.sigma.reshape(n, k), vals.color.reshape(n, k, 3),
                        vals.logits.reshape(n, k, 2), 3.5)
        alphas[k] = out.alpha
    coarse_gap = np.mean(np.abs(alphas[32] - alphas[16]))
    fine_gap = np.mean(np.abs(alphas[64] - alphas[32]))
    assert fine_gap < coarse_gap


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    n, k, c = 3, 6, 3
    t = np.sort(rng.uniform(0.1, 0.9, size=(n, k)), axis=1)
    sigma = rng.uniform(0.0, 3.0, size=(n, k))
    color = rng.uniform(0, 1, size=(n, k, 3))
    logits = rng.normal(size=(n, k, c))
    bg = np.array([0.3, 0.1, 0.6])
    d_color = rng.normal(size=(n, 3))
    d_seg = rng.normal(size=(n, c))

    def objective(s, col, lg):
        out = composite(t, s, col, lg, 1.0, bg)
        return np.sum(d_color * out.color) + np.sum(d_seg * out.raw_seg)

    ds, dc, dl = composite_backward(t, sigma, color, logits, 1.0, bg, d_color, d_seg)
    h = 1e-6
    for arr, grad in ((sigma, ds), (color, dc), (logits, dl)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + h
            fp = objective(sigma, color, logits)
            arr[ix] = orig - h
            fm = objective(sigma, color, logits)
            arr[ix] = orig
            fd = (fp - fm) / (2 * h)
            assert abs(fd - grad[ix]) < 1e-5 * max(1.0, abs(fd))


def test_render_empty_field_is_background():
    cam = look_at_camera(vec3(0, -2, 0), vec3(0, 0, 0), 60, 60, 15.5, 15.5, 32, 32)
    bg = np.array([0.25, 0.5, 0.75])
    config = RenderConfig(t_near=0.5, t_far=3.5, k_coarse=16, jitter=False, background=bg)
    res = render_image(EmptyField(), cam, config)
    assert np.allclose(res.color, bg)
    assert np.all(res.label == 1)
    assert np.all(res.alpha == 0)


def test_render_same_seed_bitwise_identical():
    scene_box = Box(part=1, color=vec3(0.9, 0.4, 0.1), density=80.0,
                    half_extents=vec3(0.4, 0.3, 0.2))
    scene = ProceduralScene(primitives=(scene_box,), num_parts=1, root_part=1,
                            joints=(), rest_angles=np.zeros(0))
    field = ProceduralField(scene)
    cam = look_at_camera(vec3(1.5, -1.5, 1.0), vec3(0, 0, 0), 60, 60, 23.5, 23.5, 48, 48)
    config = RenderConfig(t_near=0.8, t_far=4.0, k_coarse=32, k_fine=32,
                          jitter=True, seed=77)
    a = render_image(field, cam, config)
    b = render_image(field, cam, config)
    assert np.array_equal(a.color, b.color)
    assert np.array_equal(a.label, b.label)
    assert np.array_equal(a.alpha, b.alpha)


def test_render_chunk_size_does_not_change_output():
    field = GaussianBlobField()
    cam = look_at_camera(vec3(0, -2.5, 0.3), vec3(0, 0, 0), 40, 40, 15.5, 15.5, 32, 32)
    base = dict(t_near=0.5, t_far=4.0, k_coarse=16, k_fine=8, jitter=True, seed=5)
    a = render_image(field, cam, RenderConfig(**base, chunk_size=64))
    b = render_image(field, cam, RenderConfig(**base, chunk_size=4096))
    assert np.array_equal(a.color, b.color)


def box_silhouette_mask(camera, box: Box):
    """Rasterize the convex hull of the box's projected corners."""
    uv, _ = camera.project(box.corners())
    hull = ConvexHull(uv)
    eqs = hull.equations  # (n_edges, 3): a*u + b*v + c <= 0 inside
    vs, us = np.meshgrid(np.arange(camera.height, dtype=float),
                         np.arange(camera.width, dtype=float), indexing="ij")
    pts = np.stack([us.ravel(), vs.ravel(), np.ones(us.size)], axis=1)
    inside = np.all(pts @ eqs.T <= 1e-9, axis=1)
    return inside.reshape(camera.height, camera.width)


def test_render_silhouette_iou_against_projected_box():
    box = Box(part=1, color=vec3(0.2, 0.8, 0.3), density=400.0,
              half_extents=vec3(0.45, 0.3, 0.15))
    scene = ProceduralScene(primitives=(box,), num_parts=1, root_part=1,
                            joints=(), rest_angles=np.zeros(0))
    field = ProceduralField(scene)
    cam = look_at_camera(vec3(1.8, -1.6, 1.2), vec3(0, 0, 0), 160, 160, 63.5, 63.5,
                         128, 128)
    # bounds snug around the object keep the sample spacing well below the
    # silhouette feature size
    config = RenderConfig(t_near=1.9, t_far=3.5, k_coarse=128, jitter=False)
    res = render_image(field, cam, config)
    rendered = res.alpha > 0.5
    analytic = box_silhouette_mask(cam, box)
    inter = np.sum(rendered & analytic)
    union = np.sum(rendered | analytic)
    assert inter / union >= 0.98
