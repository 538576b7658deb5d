import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mvq import nn
from mvq.nn import LayerSpec


def naive_conv(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation, NHWC."""
    n, h, wd, c = x.shape
    k = w.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, w.shape[-1]))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k, :]
            out[:, i, j, :] = np.tensordot(patch, w, axes=([1, 2, 3], [0, 1, 2])) + b
    return out


# ---------------------------------------------------------------- forward oracles


def test_dense_identity():
    x = np.arange(12.0).reshape(3, 4)
    y, _ = nn.dense_forward(x, np.eye(4), np.zeros(4))
    assert np.array_equal(y, x)


def test_conv_zero_kernel():
    x = np.random.default_rng(0).normal(size=(2, 5, 5, 3))
    y, _ = nn.conv2d_forward(x, np.zeros((3, 3, 3, 4)), np.zeros(4), 1, 1)
    assert np.all(y == 0)


def test_one_by_one_conv_doubles():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    y, _ = nn.conv2d_forward(x, np.full((1, 1, 1, 1), 2.0), np.zeros(1), 1, 0)
    assert np.array_equal(y, 2 * x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive_loops(stride, pad, rng):
    x = rng.normal(size=(2, 7, 6, 3))
    w = rng.normal(size=(3, 3, 3, 5))
    b = rng.normal(size=5)
    y, _ = nn.conv2d_forward(x, w, b, stride, pad)
    assert np.allclose(y, naive_conv(x, w, b, stride, pad))


def test_maxpool_picks_window_max():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    y, _ = nn.maxpool_forward(x, 2)
    assert y[0, :, :, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]


@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)), st.integers(1, 5))
def test_mean_merge_of_identical_tensors(x, k):
    out, _ = nn.mean_merge_forward([x] * k)
    assert np.allclose(out, x, rtol=1e-12, atol=1e-9)


def test_mean_merge_weights():
    a, b, c = np.ones(3), 2 * np.ones(3), 10 * np.ones(3)
    out, coef = nn.mean_merge_forward([a, b, c], np.array([1, 0, 1]))
    assert np.allclose(out, 5.5) and coef.tolist() == [0.5, 0.0, 0.5]
    with pytest.raises(ValueError):
        nn.mean_merge_forward([a, b], np.zeros(2))


def test_layer_spec_shapes():
    conv = LayerSpec("conv2d", channels=8, kernel=3, stride=2)
    assert conv.output_shape((32, 32, 3)) == (16, 16, 8)
    assert conv.param_shapes((32, 32, 3)) == {"w": (3, 3, 3, 8), "b": (8,)}
    assert LayerSpec("dense", units=4).param_shapes((4, 4, 16)) == {"w": (256, 4), "b": (4,)}
    with pytest.raises(ValueError):
        LayerSpec("conv2d", channels=4, kernel=0)
    with pytest.raises(ValueError):
        LayerSpec("softmax")


def test_shape_error_names_layer(rng):
    specs = [LayerSpec("dense", units=3), LayerSpec("relu"), LayerSpec("dense", units=2)]
    params = nn.init_chain(specs, (4,), rng, "mlp/")
    with pytest.raises(nn.ShapeError, match="mlp/0"):
        nn.chain_forward(specs, params, "mlp/", np.zeros((2, 5)))


def test_forward_is_deterministic(rng):
    specs = [LayerSpec("conv2d", channels=4, stride=2), LayerSpec("relu"), LayerSpec("dense", units=3)]
    params = nn.init_chain(specs, (8, 8, 3), rng, "t/", np.float64)
    x = rng.normal(size=(2, 8, 8, 3))
    a, _ = nn.chain_forward(specs, params, "t/", x)
    b, _ = nn.chain_forward(specs, params, "t/", x)
    assert np.array_equal(a, b)


def test_init_ranges(rng):
    specs = [LayerSpec("conv2d", channels=16), LayerSpec("relu"), LayerSpec("dense", units=10, init="xavier")]
    p = nn.init_chain(specs, (6, 6, 4), rng, "")
    assert np.abs(p["0.w"]).max() <= np.sqrt(6 / 36) and np.abs(p["0.w"]).max() > 0.8 * np.sqrt(6 / 36)
    lim = np.sqrt(6 / (6 * 6 * 16 + 10))
    assert np.abs(p["2.w"]).max() <= lim
    assert not p["0.b"].any() and not p["2.b"].any()
    assert nn.parameter_count(specs, (6, 6, 4)) == 3 * 3 * 4 * 16 + 16 + 576 * 10 + 10


# ---------------------------------------------------------------- backward


def test_linear_gradient():
    _, cache = nn.dense_forward(np.array([[3.0]]), np.array([[0.7]]), np.zeros(1))
    _, dw, db = nn.dense_backward(np.array([[1.0]]), cache, np.array([[0.7]]))
    assert dw[0, 0] == 3.0 and db[0] == 1.0


def test_zero_output_gradient_gives_zero_gradients(rng):
    specs = [LayerSpec("conv2d", channels=4, stride=2), LayerSpec("relu"), LayerSpec("maxpool"),
             LayerSpec("dense", units=3)]
    params = nn.init_chain(specs, (8, 8, 2), rng, "", np.float64)
    y, cache = nn.chain_forward(specs, params, "", rng.normal(size=(3, 8, 8, 2)))
    grads = {}
    dx = nn.chain_backward(specs, params, cache, np.zeros_like(y), grads)
    assert not dx.any() and all(not g.any() for g in grads.values())


def test_stale_cache_is_rejected(rng):
    specs = [LayerSpec("dense", units=3)]
    params = nn.init_chain(specs, (4,), rng, "")
    _, cache = nn.chain_forward(specs, params, "", np.zeros((1, 4)))
    with pytest.raises(nn.StaleCacheError):
        nn.chain_backward(specs, dict(params), cache, np.ones((1, 3)), {})


@pytest.mark.parametrize("kind", LayerSpec.KINDS)
def test_layer_gradients_match_finite_differences(kind):
    for seed in range(10):
        errs = nn.layer_gradient_check(kind, seed)
        assert max(errs.values()) < 1e-4, (kind, seed, errs)


# ---------------------------------------------------------------- optimizer


def _p(**tensors):
    return nn.QNetworkParams("MV_Towers", {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()})


def test_sgd_zero_learning_rate():
    p = _p(w=[1.0, 2.0])
    q, _ = nn.sgd_step(p, {"w": np.array([5.0, 5.0])}, 0.0, 0.9)
    assert q.bitwise_equal(p)


def test_sgd_arithmetic():
    q, _ = nn.sgd_step(_p(w=[1.0]), {"w": np.array([2.0])}, 0.1, 0.0)
    assert q["w"][0] == pytest.approx(0.8)


def test_sgd_does_not_mutate_inputs():
    p = _p(w=[1.0])
    g = {"w": np.array([2.0])}
    v = {"w": np.array([1.0])}
    nn.sgd_step(p, g, 0.1, 0.9, v)
    assert p["w"][0] == 1.0 and v["w"][0] == 1.0 and g["w"][0] == 2.0


def test_sgd_momentum_accumulates():
    p, v = _p(w=[0.0]), None
    for _ in range(2):
        p, v = nn.sgd_step(p, {"w": np.array([1.0])}, 0.1, 0.5, v)
    # v1 = 1, v2 = 0.5 + 1
    assert p["w"][0] == pytest.approx(-0.1 - 0.15)


def test_sgd_rejects_non_finite_gradient():
    with pytest.raises(nn.TrainingDivergenceError):
        nn.sgd_step(_p(w=[1.0]), {"w": np.array([np.nan])}, 0.1)
    with pytest.raises(nn.ShapeError):
        nn.sgd_step(_p(w=[1.0]), {"w": np.array([1.0, 2.0])}, 0.1)


def test_sgd_on_convex_quadratic_decreases_monotonically(rng):
    a = rng.normal(size=(6, 6))
    hess = a @ a.T + np.eye(6)
    p, v = _p(w=rng.normal(size=6)), None
    lr = 0.5 / np.linalg.eigvalsh(hess).max()
    losses = []
    for _ in range(300):
        w = p["w"]
        losses.append(0.5 * w @ hess @ w)
        p, v = nn.sgd_step(p, {"w": hess @ w}, lr, 0.5, v)
    tail = np.array(losses[20:])
    assert np.all(np.diff(tail) <= 1e-12) and tail[-1] < 1e-6 * losses[0]


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    p = nn.QNetworkParams("MV_Dropout", {"a/0.w": rng.normal(size=(3, 4)).astype(np.float32),
                                         "a/0.b": np.zeros(4, np.float32)}, {"resolution": 32})
    vel = {"a/0.w": rng.normal(size=(3, 4)).astype(np.float32)}
    nn.save_params(p, tmp_path / "c.mvq", {"step": 7}, vel)
    back, opt = nn.load_checkpoint(tmp_path / "c.mvq")
    assert back.bitwise_equal(p) and list(back.tensors) == list(p.tensors)
    assert back.meta["extra"]["step"] == 7 and back.meta["resolution"] == 32
    assert opt["a/0.w"].tobytes() == vel["a/0.w"].tobytes()


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        nn.load_params(tmp_path / "x")
