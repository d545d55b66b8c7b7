import numpy as np
import pytest

from arfield.mlp import (Mlp, RadianceMlp, load_checkpoint, mlp_forward_backward,
                         preset_config, save_checkpoint)

# every shipped layer configuration gets a finite-difference gradient check
GRADCHECK_CONFIGS = [
    preset_config("tiny", num_parts=1),
    preset_config("tiny", num_parts=2, cond_dim=9),
    preset_config("desk", num_parts=2),
    preset_config("desk", num_parts=2, cond_dim=9, seg_head=False),
    preset_config("default", num_parts=2),
]


def unit_rows(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def scalar_objective(field, x, d, cond, us, uc, ul):
    """(objective value, relu preactivation signs) at the current params."""
    out, cache = field.forward(x, d, cond)
    signs = []
    for sub in (cache["trunk"], cache["color"]):
        for _, z in sub:
            if z is not None:
                signs.append(z > 0)
    val = float(np.sum(us * out.sigma) + np.sum(uc * out.color) + np.sum(ul * out.logits))
    return val, np.concatenate([s.ravel() for s in signs])


def test_zero_upstream_gives_zero_gradients():
    net = Mlp([4, 6, 3], np.random.default_rng(0), dtype=np.float64)
    x = np.random.default_rng(1).normal(size=(5, 4))
    _, grads, dx = mlp_forward_backward(net, x, np.zeros((5, 3)))
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)
    assert np.all(dx == 0)


def test_single_linear_layer_analytic_gradient():
    net = Mlp([3, 2], np.random.default_rng(0), dtype=np.float64)
    x = np.array([[1.0, 2.0, -1.0]])
    dy = np.array([[0.5, -2.0]])
    y, grads, dx = mlp_forward_backward(net, x, dy)
    assert np.allclose(y, x @ net.weights[0].T + net.biases[0])
    assert np.allclose(grads[0][0], dy.T @ x)  # outer product
    assert np.allclose(grads[0][1], dy[0])
    assert np.allclose(dx, dy @ net.weights[0])


def test_mlp_input_gradients_match_finite_differences():
    net = Mlp([5, 8, 8, 2], np.random.default_rng(2), dtype=np.float64)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    dy = rng.normal(size=(4, 2))
    _, _, dx = mlp_forward_backward(net, x, dy)
    h = 1e-6
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd = (np.sum(dy * net.forward(xp)[0]) - np.sum(dy * net.forward(xm)[0])) / (2 * h)
            assert abs(fd - dx[i, j]) < 1e-6 * max(1.0, abs(fd))


@pytest.mark.parametrize("cfg", GRADCHECK_CONFIGS,
                         ids=[f"L{c.hidden_layers}w{c.hidden_width}c{c.cond_dim}"
                              f"{'s' if c.seg_head else ''}" for c in GRADCHECK_CONFIGS])
def test_radiance_mlp_gradcheck(cfg):
    field = RadianceMlp(cfg, np.random.default_rng(42), dtype=np.float64)
    rng = np.random.default_rng(7)
    n = 6
    x = rng.normal(size=(n, 3)) * 0.5
    d = unit_rows(rng, n)
    cond = rng.normal(size=(n, cfg.cond_dim)) if cfg.cond_dim else None
    us = rng.normal(size=n)
    uc = rng.normal(size=(n, 3))
    ul = rng.normal(size=(n, cfg.num_parts + 1))

    out, cache = field.forward(x, d, cond)
    flat_grad, _ = field.backward(cache, us, uc, ul)

    theta = field.get_flat()
    n_params = theta.size
    probe = (np.arange(n_params) if n_params <= 4000
             else np.random.default_rng(0).choice(n_params, size=300, replace=False))
    h = 1e-4
    worst = 0.0
    skipped = 0
    for idx in probe:
        tp, tm = theta.copy(), theta.copy()
        tp[idx] += h
        tm[idx] -= h
        field.set_flat(tp)
        fp, sp = scalar_objective(field, x, d, cond, us, uc, ul)
        field.set_flat(tm)
        fm, sm = scalar_objective(field, x, d, cond, us, uc, ul)
        if np.any(sp != sm):
            # the central difference straddles a relu kink: the quotient is
            # not an estimate of the (one-sided) derivative there
            skipped += 1
            continue
        fd = (fp - fm) / (2 * h)
        rel = abs(fd - flat_grad[idx]) / max(abs(fd), abs(flat_grad[idx]), 1e-8)
        worst = max(worst, rel)
    field.set_flat(theta)
    assert skipped <= 0.05 * len(probe), f"too many kink-straddling probes ({skipped})"
    assert worst < 1e-4, f"max relative gradient error {worst:.2e}"


def test_flat_roundtrip():
    cfg = preset_config("tiny", num_parts=2)
    field = RadianceMlp(cfg, np.random.default_rng(5))
    theta = field.get_flat()
    field.set_flat(np.zeros_like(theta))
    assert np.all(field.get_flat() == 0)
    field.set_flat(theta)
    assert np.array_equal(field.get_flat(), theta)


def test_checkpoint_roundtrip(tmp_path):
    cfg = preset_config("desk", num_parts=2, cond_dim=9)
    coarse = RadianceMlp(cfg, np.random.default_rng(1))
    fine = RadianceMlp(cfg, np.random.default_rng(2))
    path = tmp_path / "model.arfc"
    save_checkpoint(path, {"coarse": coarse, "fine": fine})
    loaded = load_checkpoint(path)
    assert list(loaded) == ["coarse", "fine"]
    assert loaded["coarse"].config == cfg
    assert np.array_equal(loaded["coarse"].get_flat(), coarse.get_flat())
    assert np.array_equal(loaded["fine"].get_flat(), fine.get_flat())


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.arfc"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_seg_head_initialization_does_not_shift_other_params():
    # identical seeds with and without the seg head: every shared layer equal
    with_seg = RadianceMlp(preset_config("tiny", num_parts=2), np.random.default_rng(8))
    without = RadianceMlp(preset_config("tiny", num_parts=2, seg_head=False),
                          np.random.default_rng(8))
    n_shared = len(without.param_arrays())
    for a, b in zip(with_seg.param_arrays()[:n_shared], without.param_arrays()):
        assert np.array_equal(a, b)
