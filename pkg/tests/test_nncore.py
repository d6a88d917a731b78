import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from trajcvae import nncore as nn
from trajcvae.nncore import ShapeError


def naive_conv(x, w, b, stride, pad):
    n_b, n_c, length = x.shape
    n_o, _, k = w.shape
    xp = np.zeros((n_b, n_c, length + 2 * pad))
    xp[:, :, pad : pad + length] = x
    l_out = (length + 2 * pad - k) // stride + 1
    out = np.zeros((n_b, n_o, l_out))
    for n in range(n_b):
        for o in range(n_o):
            for l in range(l_out):
                acc = b[o]
                for c in range(n_c):
                    for j in range(k):
                        acc += w[o, c, j] * xp[n, c, l * stride + j]
                out[n, o, l] = acc
    return out


def naive_conv_transpose(x, w, b, stride, out_pad):
    n_b, n_i, length = x.shape
    _, n_o, k = w.shape
    out = np.zeros((n_b, n_o, (length - 1) * stride + k + out_pad))
    for n in range(n_b):
        for i in range(n_i):
            for l in range(length):
                for o in range(n_o):
                    for j in range(k):
                        out[n, o, l * stride + j] += x[n, i, l] * w[i, o, j]
    return out + b[None, :, None]


# -- conv1d --------------------------------------------------------------------


def test_conv_identity_kernel(rng, backend):
    x = rng.normal(size=(3, 4, 7))
    w = np.zeros((4, 4, 1))
    w[np.arange(4), np.arange(4), 0] = 1.0
    np.testing.assert_array_equal(nn.conv1d_forward(x, w, np.zeros(4)), x)


def test_conv_output_length_first_encoder_layer():
    assert nn.conv1d_output_length(24, 4, 2, 1) == 12
    layer = nn.Conv1d(4, 8, 4, 2, 1)
    assert layer.forward(np.zeros((2, 4, 24))).shape == (2, 8, 12)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (2, 0, 3), (1, 0, 2), (3, 2, 5)])
def test_conv_matches_naive_loops(rng, backend, stride, pad, k):
    x = rng.normal(size=(2, 3, 11))
    w = rng.normal(size=(5, 3, k))
    b = rng.normal(size=5)
    np.testing.assert_allclose(nn.conv1d_forward(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad),
                               atol=1e-10, rtol=0)


def test_conv_too_short_names_layer():
    layer = nn.Conv1d(2, 3, 4, 2, 0)
    with pytest.raises(ShapeError, match="Conv1d"):
        layer.forward(np.zeros((1, 2, 2)))
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((1, 5, 10)))


# -- transposed conv ---------------------------------------------------------------


def test_conv_transpose_identity_kernel(rng, backend):
    x = rng.normal(size=(2, 3, 5))
    w = np.zeros((3, 3, 1))
    w[np.arange(3), np.arange(3), 0] = 1.0
    np.testing.assert_array_equal(nn.conv_transpose1d_forward(x, w, np.zeros(3)), x)


def test_conv_transpose_output_length():
    assert nn.conv_transpose1d_output_length(3, 5, 2, 0, 1) == 10
    layer = nn.ConvTranspose1d(20, 10, 5, 2, 1)
    assert layer.forward(np.zeros((2, 20, 3))).shape == (2, 10, 10)
    with pytest.raises(ShapeError):
        nn.conv_transpose1d_forward(np.zeros((1, 2, 3)), np.zeros((2, 2, 3)), stride=1, out_pad=1)


@pytest.mark.parametrize("stride,out_pad,k", [(2, 1, 5), (2, 1, 4), (1, 0, 2), (3, 2, 3)])
def test_conv_transpose_matches_naive_scatter(rng, backend, stride, out_pad, k):
    x = rng.normal(size=(2, 4, 6))
    w = rng.normal(size=(4, 3, k))
    b = rng.normal(size=3)
    np.testing.assert_allclose(nn.conv_transpose1d_forward(x, w, b, stride, out_pad),
                               naive_conv_transpose(x, w, b, stride, out_pad), atol=1e-10, rtol=0)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(n_b=st.integers(1, 3), c_in=st.integers(1, 4), c_out=st.integers(1, 4), k=st.integers(1, 5),
       stride=st.integers(1, 3), y_len=st.integers(1, 6), rem=st.integers(0, 2), seed=st.integers(0, 2**31 - 1))
def test_adjoint_pairing(backend, n_b, c_in, c_out, k, stride, y_len, rem, seed):
    rng = np.random.default_rng(seed)
    out_pad = rem % stride
    length = (y_len - 1) * stride + k + out_pad
    w = rng.normal(size=(c_out, c_in, k))
    x = rng.normal(size=(n_b, c_in, length))
    y = rng.normal(size=(n_b, c_out, y_len))
    # conv weight (out, in, k) doubles as transposed-conv weight (in'=out, out'=in, k)
    lhs = np.sum(nn.conv1d_forward(x, w, None, stride) * y)
    rhs = np.sum(x * nn.conv_transpose1d_forward(y, w, None, stride, out_pad=out_pad))
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))


# -- batch norm ----------------------------------------------------------------


def test_batchnorm_train_standardizes(rng):
    bn = nn.BatchNorm1d(3)
    # eps shifts the variance by eps/var, so keep var well above 10
    out = bn.forward(rng.normal(5, 6, size=(8, 3, 10)))
    np.testing.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2)), 1.0, atol=1e-6)


def test_batchnorm_fixed_point(rng):
    x = rng.normal(size=(16, 2, 12))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    np.testing.assert_allclose(nn.BatchNorm1d(2).forward(x), x, rtol=1e-5, atol=1e-8)


def test_batchnorm_eval_is_batch_independent(rng):
    bn = nn.BatchNorm1d(3)
    for _ in range(5):
        bn.forward(rng.normal(2, 1.5, size=(8, 3, 6)))
    x = rng.normal(size=(8, 3, 6))
    full = bn.forward(x, train=False)
    single = bn.forward(x[:1], train=False)
    np.testing.assert_array_equal(single, full[:1])


def test_batchnorm_running_stats_momentum(rng):
    bn = nn.BatchNorm1d(1)
    x = rng.normal(3, 2, size=(4, 1, 5))
    bn.forward(x)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.1 * x.mean())
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_batch_one_train_rejected():
    with pytest.raises(ShapeError, match="batch"):
        nn.BatchNorm1d(2).forward(np.zeros((1, 2, 4)))


# -- activations ------------------------------------------------------------------


def test_activations():
    x = np.array([-2.0, -1.0, 0.0, 0.5, 3.0])
    assert nn.leaky_relu(np.array([-1.0]), 0.2)[0] == pytest.approx(-0.2)
    np.testing.assert_array_equal(nn.leaky_relu(x[x >= 0]), x[x >= 0])
    np.testing.assert_array_equal(nn.relu(x), nn.leaky_relu(x, 0.0))
    np.testing.assert_array_equal(nn.relu(x), np.maximum(x, 0))


# -- gradients ---------------------------------------------------------------------


def _fd_check(forward_loss, arrays, analytic, h=1e-5):
    worst = 0.0
    for name, arr in arrays.items():
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            lp = forward_loss()
            arr[i] = old - h
            lm = forward_loss()
            arr[i] = old
            num = (lp - lm) / (2 * h)
            a = analytic[name][i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    return worst


def _check_module(module, x, rng):
    target = rng.normal(size=module.forward(x.copy()).shape)
    if isinstance(module, nn.Sequential):
        params = module.named_params()
    else:
        params = {k: v for k, v in module.params.items()}

    def loss():
        out = module.forward(x)
        val = 0.5 * np.sum((out - target) ** 2)
        _drop(module)
        return val

    out = module.forward(x)
    gx = module.backward(out - target)
    grads = module.named_grads() if isinstance(module, nn.Sequential) else dict(module.grads)
    arrays = dict(params)
    arrays["__input__"] = x
    grads["__input__"] = gx
    return _fd_check(loss, arrays, grads)


def _drop(module):
    layers = module.layers if isinstance(module, nn.Sequential) else [module]
    for layer in layers:
        layer._cache = None


@pytest.mark.parametrize("make", [
    lambda r: (nn.Conv1d(3, 4, 3, 2, 1, r), (4, 3, 9)),
    lambda r: (nn.ConvTranspose1d(3, 2, 5, 2, 1, rng=r), (3, 3, 4)),
    lambda r: (nn.BatchNorm1d(3), (5, 3, 4)),
    lambda r: (nn.LeakyReLU(0.2), (2, 3, 5)),
    lambda r: (nn.Sequential([nn.Conv1d(2, 4, 3, 1, 1, r), nn.BatchNorm1d(4), nn.LeakyReLU(0.2),
                              nn.ConvTranspose1d(4, 3, 4, 2, 1, rng=r), nn.ReLU(),
                              nn.Conv1d(3, 2, 2, 2, 0, r)]), (4, 2, 6)),
])
def test_layer_gradients_match_finite_differences(make, backend):
    rng = np.random.default_rng(7)
    module, shape = make(rng)
    if isinstance(module, nn.BatchNorm1d):
        module.params["gamma"][:] = rng.uniform(0.5, 2.0, 3)
        module.params["beta"][:] = rng.normal(size=3)
    x = rng.normal(size=shape)
    assert _check_module(module, x, rng) < 1e-4


def test_constant_loss_gives_zero_gradients(rng):
    layer = nn.Conv1d(2, 3, 3, 1, 0, rng)
    out = layer.forward(rng.normal(size=(2, 2, 6)))
    gx = layer.backward(np.zeros_like(out))
    assert not np.any(gx) and not np.any(layer.grads["weight"]) and not np.any(layer.grads["bias"])


def test_linear_k1_l2_gradient(rng):
    layer = nn.Conv1d(1, 1, 1, 1, 0, rng)
    x = rng.normal(size=(1, 1, 5))
    y = rng.normal(size=(1, 1, 5))
    yhat = layer.forward(x)
    layer.backward(2 * (yhat - y))
    assert layer.grads["weight"][0, 0, 0] == pytest.approx(np.sum(2 * (yhat - y) * x))


def test_backward_without_forward_raises():
    with pytest.raises(RuntimeError, match="without a recorded forward"):
        nn.Conv1d(1, 1, 1).backward(np.zeros((1, 1, 1)))
    layer = nn.ReLU()
    layer.forward(np.ones((1, 1, 2)))
    layer.backward(np.ones((1, 1, 2)))
    with pytest.raises(RuntimeError):
        layer.backward(np.ones((1, 1, 2)))


def test_sequential_rejects_non_finite():
    seq = nn.Sequential([nn.Conv1d(1, 1, 1)])
    with pytest.raises(FloatingPointError, match="layer 0"):
        seq.forward(np.full((1, 1, 3), np.inf))


# -- Adam ---------------------------------------------------------------------------


def test_adam_zero_gradient_no_change():
    p = {"w": np.array([1.0, -2.0])}
    state = nn.AdamState()
    nn.adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-9])
    p = {"w": np.zeros(3)}
    state = nn.AdamState(lr=0.01)
    nn.adam_step(p, {"w": g}, state)
    np.testing.assert_allclose(p["w"], -0.01 * g / (np.abs(g) + state.eps), rtol=1e-12)


def test_adam_constant_gradient_limit():
    g = np.array([0.5, -3.0])
    p = {"w": np.zeros(2)}
    state = nn.AdamState(lr=0.01)
    prev = p["w"].copy()
    for _ in range(5000):
        prev = p["w"].copy()
        nn.adam_step(p, {"w": g}, state)
    np.testing.assert_allclose(p["w"] - prev, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nn.AdamState())
    with pytest.raises(ValueError):
        nn.AdamState(beta1=1.0)


# -- sampler, determinism, checkpoints ------------------------------------------------------


def test_gaussian_sampler():
    a = nn.gaussian_sampler((100000,), 3)
    np.testing.assert_array_equal(a, nn.gaussian_sampler((100000,), 3))
    assert not np.array_equal(a, nn.gaussian_sampler((100000,), 4))
    assert abs(a.mean()) < 0.02 and abs(a.var() - 1) < 0.03


def _train_steps(seed, n=5):
    rng = np.random.default_rng(seed)
    seq = nn.Sequential([nn.Conv1d(2, 4, 3, 1, 1, rng), nn.BatchNorm1d(4), nn.LeakyReLU(0.2), nn.Conv1d(4, 1, 2)])
    state = nn.AdamState()
    data = np.random.default_rng(99).normal(size=(6, 2, 8))
    for _ in range(n):
        out = seq.forward(data)
        seq.backward(out)
        nn.adam_step(seq.named_params(), seq.named_grads(), state)
    return seq.named_params()


def test_training_steps_bit_identical():
    a, b = _train_steps(1), _train_steps(1)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}
    state = nn.AdamState(lr=0.02)
    nn.adam_step({"a": tensors["a"].copy()}, {"a": np.ones((2, 3))}, state)
    nn.save_checkpoint(tmp_path / "c.json", tensors, state, {"note": "x"})
    back, adam, meta = nn.load_checkpoint(tmp_path / "c.json")
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    assert adam.t == 1 and adam.lr == 0.02 and meta == {"note": "x"}
    np.testing.assert_array_equal(adam.m["a"], state.m["a"])
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="format"):
        nn.load_checkpoint(tmp_path / "bad.json")
