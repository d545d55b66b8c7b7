import numpy as np
import pytest

from arfield.conditioning import (ConditioningContext, EncoderConfig, SourceView,
                                  aggregate_views, extract_features, sample_feature)
from arfield.geometry import Camera, look_at_camera, vec3


def front_camera(w=32, h=32, fx=40.0):
    return Camera(fx=fx, fy=fx, cx=(w - 1) / 2, cy=(h - 1) / 2, width=w, height=h)


def test_identity_encoder_returns_image():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(16, 16, 3))
    view = SourceView(img, front_camera(16, 16))
    fmap = extract_features(view, EncoderConfig(kind="identity"))
    assert fmap.shape == (16, 16, 3)
    assert np.array_equal(fmap, img)


def test_pyramid_on_constant_image_is_constant():
    img = np.full((16, 16, 3), 0.4)
    view = SourceView(img, front_camera(16, 16))
    fmap = extract_features(view, EncoderConfig(kind="pyramid", levels=2))
    assert fmap.shape == (16, 16, 6)
    assert np.allclose(fmap, 0.4)


def test_pyramid_step_edge_varies_monotonically():
    img = np.zeros((32, 32, 3))
    img[:, 16:] = 1.0
    view = SourceView(img, front_camera())
    fmap = extract_features(view, EncoderConfig(kind="pyramid", levels=3))
    row = fmap[16, :, :]  # all 9 channels along a scanline crossing the edge
    assert np.all(np.diff(row, axis=0) >= -1e-12)
    # coarse level actually blurs: strictly between 0 and 1 near the edge
    assert 0.0 < row[15, 6] < 1.0


def test_view_image_dimension_mismatch():
    with pytest.raises(ValueError):
        SourceView(np.zeros((8, 9, 3)), front_camera(8, 8))


def test_sample_feature_at_pixel_center():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, size=(32, 32, 3))
    cam = front_camera()
    # a point on the optical axis projects to the principal point (15.5, 15.5);
    # use a point projecting exactly to pixel (20, 12)
    u, v, depth = 20.0, 12.0, 2.0
    x = cam.world_to_camera.inverse().apply(
        np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth]))
    feats, ok = sample_feature(img, cam, x)
    assert ok[0]
    assert np.allclose(feats[0], img[12, 20])


def test_sample_feature_behind_camera_invalid():
    cam = front_camera()
    feats, ok = sample_feature(np.ones((32, 32, 3)), cam, np.array([0.0, 0.0, -1.0]))
    assert not ok[0]
    assert np.all(feats[0] == 0)


def test_sample_feature_outside_frustum_invalid():
    cam = front_camera()
    feats, ok = sample_feature(np.ones((32, 32, 3)), cam, np.array([50.0, 0.0, 1.0]))
    assert not ok[0] and np.all(feats[0] == 0)


def test_sampled_feature_is_continuous():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, size=(32, 32, 3))
    cam = front_camera()
    # random points safely inside the frustum
    z = rng.uniform(1.0, 3.0, size=100)
    u = rng.uniform(2, 29, size=100)
    v = rng.uniform(2, 29, size=100)
    pts = np.stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z], axis=1)
    eps = 1e-6
    for p in pts:
        f0, _ = sample_feature(img, cam, p)
        f1, _ = sample_feature(img, cam, p + eps * np.array([1.0, 1.0, 0.0]))
        assert np.max(np.abs(f1 - f0)) < 1e-4


def test_aggregate_single_view_passthrough():
    f = np.random.default_rng(3).normal(size=(5, 4))
    ok = np.ones(5, dtype=bool)
    assert np.allclose(aggregate_views([f], [ok]), f)


def test_aggregate_identical_views_idempotent():
    f = np.random.default_rng(4).normal(size=(5, 4))
    ok = np.ones(5, dtype=bool)
    assert np.allclose(aggregate_views([f, f], [ok, ok]), f)


def test_aggregate_masks_invalid_views():
    f1 = np.full((3, 2), 2.0)
    f2 = np.zeros((3, 2))
    ok1 = np.ones(3, dtype=bool)
    ok2 = np.zeros(3, dtype=bool)
    out = aggregate_views([f1, f2], [ok1, ok2])
    assert np.allclose(out, 2.0)
    none = aggregate_views([f2, f2], [ok2, ok2])
    assert np.all(none == 0)


def test_aggregate_requires_views():
    with pytest.raises(ValueError):
        aggregate_views([], [])


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(5)
    f1, f2, f3 = (rng.normal(size=(6, 3)) for _ in range(3))
    ok = [rng.random(6) > 0.3 for _ in range(3)]
    a = aggregate_views([f1, f2, f3], ok)
    b = aggregate_views([f3, f1, f2], [ok[2], ok[0], ok[1]])
    assert np.allclose(a, b)


def test_context_features_deterministic_and_shaped():
    rng = np.random.default_rng(6)
    cams = [look_at_camera(vec3(2, 0, 0.5), vec3(0, 0, 0), 40, 40, 15.5, 15.5, 32, 32),
            look_at_camera(vec3(-1, 2, 0.5), vec3(0, 0, 0), 40, 40, 15.5, 15.5, 32, 32)]
    views = [SourceView(rng.uniform(0, 1, size=(32, 32, 3)), c) for c in cams]
    ctx = ConditioningContext(views, EncoderConfig(kind="pyramid", levels=3))
    assert ctx.feature_dim == 9
    x = rng.normal(size=(50, 3)) * 0.3
    a = ctx.features_at(x)
    b = ctx.features_at(x)
    assert a.shape == (50, 9)
    assert np.array_equal(a, b)
