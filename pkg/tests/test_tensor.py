import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plcrnn import tensor as T
from plcrnn.tensor import Tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def rnd(rng, *shape):
    return t64(rng.standard_normal(shape))


# -- convolution ----------------------------------------------------------------------

def brute_conv(x, w, b, stride, freq_pad=(0, 0)):
    """Direct loops over output cells of the causal convolution."""
    C, Tn, F = x.shape
    Co, Ci, KT, KF = w.shape
    xp = np.zeros((C, Tn + KT - 1, F + sum(freq_pad)))
    xp[:, KT - 1:, freq_pad[0]:freq_pad[0] + F] = x
    Fo = (F + sum(freq_pad) - KF) // stride[1] + 1
    out = np.zeros((Co, Tn, Fo))
    for o in range(Co):
        for t in range(Tn):
            for f in range(Fo):
                acc = b[o]
                for c in range(Ci):
                    for kt in range(KT):
                        for kf in range(KF):
                            acc += w[o, c, kt, kf] * xp[c, t + kt, f * stride[1] + kf]
                out[o, t, f] = acc
    return out


def test_conv_first_encoder_shape():
    x = Tensor(np.zeros((1, 7, 161)))
    y = T.conv2d_causal(x, Tensor(np.zeros((16, 1, 2, 3))), Tensor(np.zeros(16)), (1, 2))
    assert y.shape == (16, 7, 80)


def test_conv_zero_kernel_gives_zero():
    rng = np.random.default_rng(1)
    y = T.conv2d_causal(rnd(rng, 1, 5, 161), Tensor(np.zeros((4, 1, 2, 3))), Tensor(np.zeros(4)), (1, 2))
    assert np.all(y.data == 0)


def test_conv_matches_loops_small():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((1, 3, 4)), rng.standard_normal((1, 1, 2, 2)), rng.standard_normal(1)
    y = T.conv2d_causal(t64(x), t64(w), t64(b), (1, 1))
    np.testing.assert_allclose(y.data, brute_conv(x, w, b, (1, 1)), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [((1, 1), (0, 0)), ((1, 2), (0, 0)), ((1, 2), (1, 1))])
def test_conv_matches_loops_batched(stride, pad):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5, 9))
    w, b = rng.standard_normal((4, 3, 2, 3)), rng.standard_normal(4)
    y = T.conv2d_causal(t64(x), t64(w), t64(b), stride, pad)
    for i in range(2):
        np.testing.assert_allclose(y.data[i], brute_conv(x[i], w, b, stride, pad), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(T.DimensionError):
        T.conv2d_causal(Tensor(np.zeros((2, 3, 9))), Tensor(np.zeros((4, 3, 2, 3))), Tensor(np.zeros(4)))


def test_deconv_first_decoder_shape():
    x = Tensor(np.zeros((128, 6, 4)))
    y = T.deconv2d_causal(x, Tensor(np.zeros((128, 32, 2, 3))), Tensor(np.zeros(32)), (1, 2))
    assert y.shape == (32, 6, 9)


def test_deconv_unit_kernel_is_identity():
    rng = np.random.default_rng(4)
    x = rnd(rng, 1, 5, 7)
    y = T.deconv2d_causal(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), (1, 1))
    np.testing.assert_array_equal(y.data, x.data)


def test_deconv_out_pad_column_holds_bias():
    rng = np.random.default_rng(5)
    y = T.deconv2d_causal(rnd(rng, 2, 4, 39), rnd(rng, 2, 3, 2, 3), t64([0.5, -1.0, 2.0]), (1, 2), out_pad=1)
    assert y.shape == (3, 4, 80)
    np.testing.assert_allclose(y.data[:, :, -1], np.array([0.5, -1.0, 2.0])[:, None] * np.ones((1, 4)))


def test_deconv_is_causal_in_time():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 6, 5))
    w, b = t64(rng.standard_normal((3, 2, 2, 3))), t64(np.zeros(2))
    y0 = T.deconv2d_causal(t64(x), w, b, (1, 2)).data
    x[:, 4:] = rng.standard_normal((3, 2, 5))
    y1 = T.deconv2d_causal(t64(x), w, b, (1, 2)).data
    np.testing.assert_array_equal(y0[:, :4], y1[:, :4])


@pytest.mark.parametrize("stride,F", [((1, 1), 6), ((1, 2), 9), ((1, 2), 10)])
def test_adjoint_identity(stride, F):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 5, F))
    w = rng.standard_normal((4, 3, 2, 3))
    y = T.conv2d_causal(t64(x), t64(w), t64(np.zeros(4)), stride)
    u = rng.standard_normal(y.shape)
    out_pad = F - ((y.shape[2] - 1) * stride[1] + 3)
    xt = T.conv_transpose2d(t64(u), t64(w), t64(np.zeros(3)), stride, out_pad, time_crop="start")
    assert xt.shape == x.shape
    lhs, rhs = np.sum(y.data * u), np.sum(x * xt.data)
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


# -- lstm -------------------------------------------------------------------------------

def scalar_lstm(x, w_ih, w_hh, bias):
    """Per-unit loops with the i, f, g, o gate layout."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    Tn, D = x.shape
    H = w_hh.shape[0]
    h, c = [0.0] * H, [0.0] * H
    out = []
    for t in range(Tn):
        z = [bias[k] + sum(x[t, d] * w_ih[d, k] for d in range(D)) + sum(h[j] * w_hh[j, k] for j in range(H))
             for k in range(4 * H)]
        new_h, new_c = [], []
        for u in range(H):
            i, f = sig(z[u]), sig(z[H + u])
            g, o = math.tanh(z[2 * H + u]), sig(z[3 * H + u])
            cu = f * c[u] + i * g
            new_c.append(cu)
            new_h.append(o * math.tanh(cu))
        h, c = new_h, new_c
        out.append(h)
    return np.array(out)


def test_lstm_matches_scalar_recurrence():
    rng = np.random.default_rng(8)
    x, wi, wh, b = (rng.standard_normal(s) for s in ((3, 2), (2, 8), (2, 8), (8,)))
    y = T.lstm(t64(x), t64(wi), t64(wh), t64(b))
    np.testing.assert_allclose(y.data, scalar_lstm(x, wi, wh, b), atol=1e-12)


def test_lstm_zero_everything():
    y = T.lstm(Tensor(np.zeros((5, 4))), Tensor(np.zeros((4, 12))), Tensor(np.zeros((3, 12))), Tensor(np.zeros(12)))
    assert np.all(y.data == 0)


def test_lstm_bottleneck_shape():
    y = T.lstm(Tensor(np.zeros((4, 256))), Tensor(np.zeros((256, 1024))), Tensor(np.zeros((256, 1024))),
               Tensor(np.zeros(1024)))
    assert y.shape == (4, 256)


def test_lstm_rejects_wrong_weights():
    with pytest.raises(T.DimensionError):
        T.lstm(Tensor(np.zeros((4, 5))), Tensor(np.zeros((4, 12))), Tensor(np.zeros((3, 12))), Tensor(np.zeros(12)))


def test_lstm_batch_rows_independent():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 4, 2))
    wi, wh, b = rnd(rng, 2, 12), rnd(rng, 3, 12), rnd(rng, 12)
    yb = T.lstm(t64(x), wi, wh, b).data
    for i in range(3):
        np.testing.assert_allclose(yb[i], T.lstm(t64(x[i]), wi, wh, b).data, atol=1e-13)


# -- batch norm -------------------------------------------------------------------------

def test_batch_norm_train_normalises():
    rng = np.random.default_rng(10)
    x = t64(rng.standard_normal((4, 3, 6, 5)) * 3 + 2)
    st_ = T.BatchNormState(3)
    y = T.batch_norm(x, t64(np.ones(3)), t64(np.zeros(3)), st_, training=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-5)
    assert st_.initialized


def test_batch_norm_constant_channel_gives_beta():
    x = t64(np.full((2, 1, 4, 3), 7.0))
    y = T.batch_norm(x, t64([1.5]), t64([0.25]), T.BatchNormState(1), training=True)
    np.testing.assert_allclose(y.data, 0.25, atol=1e-12)


def test_batch_norm_eval_matches_formula():
    rng = np.random.default_rng(11)
    st_ = T.BatchNormState(2)
    st_.mean, st_.var, st_.initialized = np.array([0.5, -1.0]), np.array([2.0, 0.25]), True
    x = rng.standard_normal((1, 2, 3, 4))
    g, b = np.array([1.2, 0.7]), np.array([0.1, -0.3])
    y = T.batch_norm(t64(x), t64(g), t64(b), st_, training=False)
    want = np.empty_like(x)
    for c in range(2):
        want[:, c] = (x[:, c] - st_.mean[c]) / np.sqrt(st_.var[c] + st_.eps) * g[c] + b[c]
    np.testing.assert_allclose(y.data, want, atol=1e-12)


def test_batch_norm_eval_needs_stats():
    with pytest.raises(T.BatchNormStateError):
        T.batch_norm(t64(np.ones((1, 2, 3, 4))), t64(np.ones(2)), t64(np.zeros(2)), T.BatchNormState(2), False)


def test_batch_norm_mask_ignores_padding():
    rng = np.random.default_rng(12)
    real = rng.standard_normal((1, 2, 4, 5))
    padded = np.concatenate([real, rng.standard_normal((1, 2, 3, 5)) * 100], axis=2)
    mask = np.array([[1, 1, 1, 1, 0, 0, 0]])
    g, b = t64(np.ones(2)), t64(np.zeros(2))
    y0 = T.batch_norm(t64(real), g, b, T.BatchNormState(2), True).data
    y1 = T.batch_norm(t64(padded), g, b, T.BatchNormState(2), True, frame_mask=mask).data
    np.testing.assert_allclose(y1[:, :, :4], y0, atol=1e-12)


# -- elementwise and shape ops --------------------------------------------------------------

def test_activation_values():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-7)
    assert T.elu(Tensor(-1.0)).item() == pytest.approx(math.exp(-1) - 1, abs=1e-7)


def test_sigmoid_and_softplus_are_stable():
    x = Tensor(np.array([-800.0, -40.0, 0.0, 40.0, 800.0]))
    s = T.sigmoid(x).data
    sp = T.softplus(x).data
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
    assert np.all(np.isfinite(sp)) and sp[-1] == 800.0 and sp[0] == 0.0
    assert np.all(T.sigmoid(Tensor(np.array([-50.0, 50.0, 3.0]), dtype=np.float32)).data > 0)


def test_concat_channels():
    a, b = Tensor(np.zeros((1, 4, 161))), Tensor(np.ones((1, 4, 161)))
    assert T.concat([a, b], axis=0).shape == (2, 4, 161)


def test_mse_loss_conventions():
    x = Tensor(np.array([1.0, 2.0]))
    assert T.mse_loss(x, x).item() == 0.0
    assert T.mse_loss(x, Tensor(np.zeros(2))).item() == 2.5


def test_sum_gradient_is_ones():
    x = t64(np.random.default_rng(13).standard_normal((3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_accumulates():
    x = t64([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(x.grad, 4 * np.array([1.0, 2.0]))
    T.zero_grad([x])
    assert x.grad is None


def test_shared_input_gradients_add():
    x = t64([3.0])
    (x * x + x).sum().backward()
    assert x.grad[0] == 7.0


def test_no_grad_builds_no_tape():
    x = t64([1.0])
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_broadcast_add_unbroadcasts():
    a, b = t64(np.ones((2, 3))), t64(np.ones(3))
    (a + b).sum().backward()
    np.testing.assert_array_equal(b.grad, [2, 2, 2])


# -- finite differences -------------------------------------------------------------------------

def test_gradient_check_linear():
    assert T.gradient_check(lambda x: (x * 3.0).sum(), [t64([0.3, -1.2])]) < 1e-10


def test_gradient_check_sigmoid_chain():
    f = lambda x: T.sigmoid(T.sigmoid(x * 2.0) * 3.0 - 1.0).sum()
    assert T.gradient_check(f, [t64([0.1, -0.7, 1.5])]) < 1e-6


def test_gradient_check_requires_float64():
    with pytest.raises(TypeError):
        T.gradient_check(lambda x: x.sum(), [Tensor(np.ones(2), dtype=np.float32)])


def test_gradient_check_flags_wrong_adjoint():
    def bad_square(x):
        return T._node(x.data ** 2, (x,), lambda g: (g * x.data,), "bad")  # missing factor 2

    assert T.gradient_check(lambda x: bad_square(x).sum(), [t64([1.0, 2.0])]) > 0.4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradient_check_raises_on_non_finite():
    with pytest.raises(FloatingPointError):
        T.gradient_check(lambda x: T.exp(x * 1000.0).sum(), [t64([1.0])])


def test_grad_mse_of_affine_sigmoid():
    rng = np.random.default_rng(14)
    W, x, b, y = rnd(rng, 3, 4), rnd(rng, 4, 2), rnd(rng, 3, 1), t64(rng.random((3, 2)), grad=False)
    f = lambda W, x, b: T.mse_loss(T.sigmoid(W @ x + b), y)
    assert T.gradient_check(f, [W, x, b]) < 1e-4


OP_CASES = {
    "add": lambda r: ((lambda a, b: (a + b).square().sum()), [rnd(r, 2, 3), rnd(r, 3)]),
    "mul": lambda r: ((lambda a, b: (a * b).sum()), [rnd(r, 2, 3), rnd(r, 2, 3)]),
    "div": lambda r: ((lambda a, b: (a / b).sum()), [rnd(r, 4), t64(r.random(4) + 1)]),
    "exp": lambda r: ((lambda a: T.exp(a).sum()), [rnd(r, 5)]),
    "tanh": lambda r: ((lambda a: T.tanh(a).square().sum()), [rnd(r, 5)]),
    "sigmoid": lambda r: ((lambda a: T.sigmoid(a).square().sum()), [rnd(r, 5)]),
    "softplus": lambda r: ((lambda a: T.softplus(a).square().sum()), [rnd(r, 5)]),
    "elu": lambda r: ((lambda a: T.elu(a).square().sum()), [t64([-1.3, -0.2, 0.4, 2.0])]),
    "mean": lambda r: ((lambda a: a.mean(axis=1).square().sum()), [rnd(r, 3, 4)]),
    "reshape_transpose": lambda r: ((lambda a: (a.reshape(4, 3).transpose() * t64(np.arange(12.0).reshape(3, 4))).sum()),
                                    [rnd(r, 2, 6)]),
    "getitem": lambda r: ((lambda a: a[1:, ::2].square().sum()), [rnd(r, 3, 5)]),
    "concat": lambda r: ((lambda a, b: T.concat([a, b], axis=0).square().sum()), [rnd(r, 2, 3), rnd(r, 1, 3)]),
    "pad": lambda r: ((lambda a: T.pad(a, ((1, 0), (0, 2))).square().sum()), [rnd(r, 2, 3)]),
    "matmul": lambda r: ((lambda a, b: (a @ b).square().sum()), [rnd(r, 2, 3, 4), rnd(r, 4, 2)]),
    "mse_weighted": lambda r: ((lambda a, b: T.mse_loss(a, b, np.array([[0.2], [0.8]]))), [rnd(r, 2, 3), rnd(r, 2, 3)]),
    "conv": lambda r: ((lambda x, w, b: T.conv2d_causal(x, w, b, (1, 2)).square().sum()),
                       [rnd(r, 2, 2, 4, 9), rnd(r, 3, 2, 2, 3), rnd(r, 3)]),
    "deconv": lambda r: ((lambda x, w, b: T.deconv2d_causal(x, w, b, (1, 2), 1).square().sum()),
                         [rnd(r, 2, 3, 4, 4), rnd(r, 3, 2, 2, 3), rnd(r, 2)]),
    "lstm": lambda r: ((lambda x, wi, wh, b: T.lstm(x, wi, wh, b).square().sum()),
                       [rnd(r, 2, 4, 3), rnd(r, 3, 8), rnd(r, 2, 8), rnd(r, 8)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    f, inputs = OP_CASES[name](np.random.default_rng(15))
    assert T.gradient_check(f, inputs) < 1e-4


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    rng = np.random.default_rng(16)
    st_ = T.BatchNormState(2)
    st_.mean, st_.var, st_.initialized = np.array([0.1, -0.2]), np.array([1.5, 0.5]), True
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]])
    up = t64(rng.standard_normal((2, 2, 4, 3)), grad=False)

    def f(x, g, b):
        return (T.batch_norm(x, g, b, st_.copy(), training, frame_mask=mask) * up).sum()

    assert T.gradient_check(f, [rnd(rng, 2, 2, 4, 3), rnd(rng, 2), rnd(rng, 2)]) < 1e-4


# -- dtype and serialisation -------------------------------------------------------------------

def test_default_dtype_switch():
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@given(st.lists(st.integers(1, 4), min_size=0, max_size=3), st.sampled_from([np.float32, np.float64]))
@settings(max_examples=30, deadline=None)
def test_tensor_serialisation_round_trip(shape, dtype):
    arr = np.random.default_rng(len(shape)).standard_normal(shape).astype(dtype)
    buf = io.BytesIO()
    T.write_tensor(buf, arr)
    buf.seek(0)
    back = T.read_tensor(buf)
    assert back.dtype == dtype and back.shape == tuple(shape)
    np.testing.assert_array_equal(back, arr)


def test_tensor_serialisation_rejects_truncation_and_magic():
    buf = io.BytesIO()
    T.write_tensor(buf, np.ones((3, 3)))
    raw = buf.getvalue()
    with pytest.raises(T.SerializationError):
        T.read_tensor(io.BytesIO(raw[:-5]))
    with pytest.raises(T.SerializationError):
        T.read_tensor(io.BytesIO(b"XXXX" + raw[4:]))
