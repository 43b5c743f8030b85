import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check
from pvn.tensorcore import (
    Adam,
    AdamState,
    DimensionError,
    NonFiniteGradient,
    Tape,
    Tensor,
    adam_step,
    channel_softmax,
    conv2d,
    deconv2d,
    kl_loss,
    leaky_relu,
    load_tensors,
    lstm_cell,
    save_tensors,
    tsum,
)

F64 = np.float64


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def conv_oracle(x, w, stride, pad):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for a in range(o):
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for ci in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            s += xp[ci, i * stride + u, j * stride + v] * w[a, ci, u, v]
                out[a, i, j] = s
    return out


# -- conv2d ---------------------------------------------------------------


def test_conv_scalar():
    out = conv2d(Tensor([[[2.0]]]), Tensor([[[[3.0]]]]))
    assert out.data.shape == (1, 1, 1) and out.data[0, 0, 0] == 6.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 4, 5))
    out = conv2d(Tensor(x, dtype=F64), Tensor(np.ones((1, 1, 1, 1)), dtype=F64))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_nested_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = conv2d(Tensor(x, dtype=F64), Tensor(w, dtype=F64), stride, pad).data
    np.testing.assert_allclose(out, conv_oracle(x, w, stride, pad), atol=1e-6)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 1, 1))))


def test_conv_batched_equals_unbatched():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 2, 6, 7))
    w = rng.normal(size=(4, 2, 3, 3))
    batched = conv2d(Tensor(x, dtype=F64), Tensor(w, dtype=F64), 2, 1).data
    for n in range(3):
        single = conv2d(Tensor(x[n], dtype=F64), Tensor(w, dtype=F64), 2, 1).data
        np.testing.assert_allclose(batched[n], single, atol=1e-12)


# -- deconv2d -------------------------------------------------------------


def test_deconv_scalar_kernel():
    x = np.random.default_rng(2).normal(size=(1, 3, 4))
    out = deconv2d(Tensor(x, dtype=F64), Tensor(np.full((1, 1, 1, 1), 2.5), dtype=F64))
    np.testing.assert_allclose(out.data, 2.5 * x)


def test_deconv_output_width():
    out = deconv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 6, 6)


def test_deconv_channel_mismatch():
    with pytest.raises(DimensionError):
        deconv2d(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((3, 1, 2, 2))))


@pytest.mark.parametrize("k,stride,pad,size", [(3, 1, 1, 6), (3, 2, 1, 7), (4, 2, 1, 8), (2, 2, 0, 6)])
def test_conv_deconv_adjoint(k, stride, pad, size):
    rng = np.random.default_rng(k + stride + pad)
    w = rng.normal(size=(3, 2, k, k))
    x = rng.normal(size=(2, size, size))
    cx = conv2d(Tensor(x, dtype=F64), Tensor(w, dtype=F64), stride, pad).data
    y = rng.normal(size=cx.shape)
    dy = deconv2d(Tensor(y, dtype=F64), Tensor(w, dtype=F64), stride, pad).data
    # deconv may be shorter than x when conv discarded trailing rows
    xs = x[:, : dy.shape[1], : dy.shape[2]]
    assert abs(np.sum(cx * y) - np.sum(xs * dy)) < 1e-4


# -- lstm -----------------------------------------------------------------


def test_lstm_zero_weights_closed_form():
    d = 3
    c_prev = np.array([0.4, -1.0, 2.0])
    w = (Tensor(np.zeros((4 * d, 2))), Tensor(np.zeros((4 * d, d))), Tensor(np.zeros(4 * d)))
    h, c = lstm_cell(Tensor(np.ones(2)), Tensor(np.ones(d)), Tensor(c_prev), w)
    np.testing.assert_allclose(c.data, 0.5 * c_prev, rtol=1e-6)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c_prev), rtol=1e-6)


def test_lstm_zero_everything():
    d = 2
    w = (Tensor(np.zeros((4 * d, 2))), Tensor(np.zeros((4 * d, d))), Tensor(np.zeros(4 * d)))
    h, _ = lstm_cell(Tensor(np.zeros(2)), Tensor(np.zeros(d)), Tensor(np.zeros(d)), w)
    np.testing.assert_array_equal(h.data, 0.0)


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_lstm_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    n_in, d = 4, 3
    wx, wh, b = rng.normal(size=(4 * d, n_in)), rng.normal(size=(4 * d, d)), rng.normal(size=4 * d)
    x, hp, cp = rng.normal(size=n_in), rng.normal(size=d), rng.normal(size=d)
    h, c = lstm_cell(Tensor(x, dtype=F64), Tensor(hp, dtype=F64), Tensor(cp, dtype=F64),
                     (Tensor(wx, dtype=F64), Tensor(wh, dtype=F64), Tensor(b, dtype=F64)))
    for k in range(d):
        pre = []
        for gate in range(4):
            row = gate * d + k
            z = b[row]
            for j in range(n_in):
                z += wx[row, j] * x[j]
            for j in range(d):
                z += wh[row, j] * hp[j]
            pre.append(z)
        ig, fg, gg, og = _sig(pre[0]), _sig(pre[1]), math.tanh(pre[2]), _sig(pre[3])
        ck = fg * cp[k] + ig * gg
        assert abs(c.data[k] - ck) < 1e-6
        assert abs(h.data[k] - og * math.tanh(ck)) < 1e-6


def test_lstm_size_mismatch():
    w = (Tensor(np.zeros((8, 2))), Tensor(np.zeros((8, 2))), Tensor(np.zeros(8)))
    with pytest.raises(DimensionError):
        lstm_cell(Tensor(np.zeros(2)), Tensor(np.zeros(3)), Tensor(np.zeros(3)), w)


# -- softmax / kl ---------------------------------------------------------


def test_softmax_uniform():
    out = channel_softmax(Tensor(np.zeros((2, 3, 4))))
    np.testing.assert_allclose(out.data, 1.0 / 12, rtol=1e-6)


def test_softmax_shift_invariance():
    x = np.random.default_rng(4).normal(size=(2, 4, 4))
    a = channel_softmax(Tensor(x, dtype=F64)).data
    shifted = x + np.array([3.0, -7.0])[:, None, None]
    b = channel_softmax(Tensor(shifted, dtype=F64)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 200.0))
def test_softmax_is_distribution(seed, scale):
    x = np.random.default_rng(seed).normal(size=(2, 4, 4)) * scale
    out = channel_softmax(Tensor(x.astype(np.float32))).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=(1, 2)), 1.0, atol=1e-6)


def test_kl_values():
    p = Tensor([0.2, 0.3, 0.5], dtype=F64)
    assert abs(kl_loss(p, p).item()) < 1e-12
    assert abs(kl_loss(Tensor([1.0, 0.0], dtype=F64), Tensor([0.5, 0.5], dtype=F64)).item() - math.log(2)) < 1e-9
    a = kl_loss(Tensor([0.9, 0.1], dtype=F64), Tensor([0.5, 0.5], dtype=F64)).item()
    b = kl_loss(Tensor([0.5, 0.5], dtype=F64), Tensor([0.9, 0.1], dtype=F64)).item()
    assert abs(a - b) > 1e-3


def test_kl_finite_when_prediction_zero():
    val = kl_loss(Tensor([0.5, 0.5], dtype=F64), Tensor([1.0, 0.0], dtype=F64)).item()
    assert math.isfinite(val) and val > 5.0


# -- backward -------------------------------------------------------------


def test_backward_square():
    x = t64([1.0, -2.0, 3.0])
    with Tape() as tape:
        loss = tsum(x * x)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_unused_param_zero():
    x, p = t64([1.0, 2.0]), t64([5.0])
    with Tape() as tape:
        loss = tsum(x * 3.0)
    tape.backward(loss, params=[x, p])
    np.testing.assert_array_equal(p.grad, 0.0)


def test_backward_accumulates():
    x = t64([1.0, 2.0])
    for _ in range(2):
        with Tape() as tape:
            loss = tsum(x * x)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_backward_rejects_nonscalar():
    x = t64([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y)


def test_no_tape_no_recording():
    x = t64([1.0])
    y = x * 2.0
    assert not y.requires_grad


@pytest.mark.parametrize("seed", range(20))
def test_composite_gradient(seed):
    rng = np.random.default_rng(seed)
    while True:  # keep pre-activations off the leaky-relu kink
        x = t64(rng.normal(size=(2, 6, 6)))
        w = t64(rng.normal(size=(2, 2, 3, 3)) * 0.5)
        b = t64(rng.normal(size=(2, 1, 1)))
        if np.abs((conv2d(x, w, 1, 1) + b).data).min() > 1e-2:
            break
    target = rng.dirichlet(np.ones(36), size=2).reshape(2, 6, 6)

    def loss():
        h = leaky_relu(conv2d(x, w, 1, 1) + b)
        p = channel_softmax(h)
        return kl_loss(Tensor(target, dtype=F64), p)

    assert check(loss, [x, w, b]) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_deconv_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    x = t64(rng.normal(size=(3, 4, 4)))
    w = t64(rng.normal(size=(3, 2, 4, 4)) * 0.3)
    r = rng.normal(size=(2, 8, 8))
    assert check(lambda: tsum(deconv2d(x, w, 2, 1) * Tensor(r, dtype=F64)), [x, w]) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_lstm_gradient(seed):
    rng = np.random.default_rng(200 + seed)
    d, n = 3, 4
    wx, wh, b = t64(rng.normal(size=(4 * d, n))), t64(rng.normal(size=(4 * d, d))), t64(rng.normal(size=4 * d))
    xs = [t64(rng.normal(size=n)) for _ in range(3)]

    def loss():
        h = Tensor(np.zeros(d), dtype=F64)
        c = Tensor(np.zeros(d), dtype=F64)
        for x in xs:
            h, c = lstm_cell(x, h, c, (wx, wh, b))
        return tsum(h * h)

    assert check(loss, [wx, wh, b, xs[0]]) < 1e-4


# -- adam -----------------------------------------------------------------


def test_adam_defaults():
    s = AdamState()
    assert s.lr == 0.001 and s.weight_decay == 1e-6


def test_adam_weight_decay_only():
    p = Tensor(np.array([2.0, -4.0]), dtype=F64)
    state = AdamState()
    adam_step({"p": p}, {"p": np.zeros(2)}, state)
    np.testing.assert_allclose(p.data, [2.0 - 0.001 * 1e-6 * 2.0, -4.0 + 0.001 * 1e-6 * 4.0], rtol=0, atol=1e-15)


def test_adam_first_step_magnitude():
    p = Tensor(np.array([1.0, 1.0, 1.0]), dtype=F64)
    before = p.data.copy()
    adam_step({"p": p}, {"p": np.array([0.3, -5.0, 100.0])}, AdamState(weight_decay=0.0))
    np.testing.assert_allclose(np.abs(p.data - before), 0.001, rtol=1e-4)
    assert np.all(np.sign(before - p.data) == [1, -1, 1])


def test_adam_nan_names_parameter():
    p = Tensor(np.zeros(2))
    with pytest.raises(NonFiniteGradient, match="bad_weight"):
        adam_step({"bad_weight": p}, {"bad_weight": np.array([np.nan, 0.0])}, AdamState())


def test_adam_step_counter():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam({"p": p})
    for k in range(3):
        p.grad = np.ones(2, dtype=np.float32)
        opt.step()
        assert opt.state.step == k + 1


# -- determinism / checkpoint ---------------------------------------------


def test_determinism():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 8, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = tsum(channel_softmax(leaky_relu(conv2d(x, w, 2, 1))[:2]) * 3.0)
        tape.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes(), x.grad.tobytes()

    assert run() == run()


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b.c": np.float32(rng.normal(size=7)),
               "scalar": np.array(2.5, dtype=np.float32)}
    path = tmp_path / "x.pvn"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_checkpoint_bytes(tmp_path):
    path = tmp_path / "y.pvn"
    save_tensors(path, {"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    raw = path.read_bytes()
    expected = (b"PVN1" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
                + (1).to_bytes(4, "little") + b"w" + (2).to_bytes(4, "little")
                + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
                + np.array([1.0, 2.0], dtype="<f4").tobytes())
    assert raw == expected


# -- per-op finite differences -------------------------------------------------------------

import zlib  # noqa: E402

import scipy.sparse as sp  # noqa: E402

import pvn.tensorcore as tc  # noqa: E402


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from(rng, shape, point, margin=1e-2):
    """Normals with no entry within ``margin`` of a kink at ``point``."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x - point) < margin, point + margin * 2, x)


# name -> (input builder, loss over the inputs); each loss is projected on a fixed random weight
OPS = {
    "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: tc.add(a, b)),
    "sub": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))], lambda a, b: tc.sub(a, b)),
    "mul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: tc.mul(a, b)),
    "div": (lambda r: [r.normal(size=(3, 4)), _pos(r, (3, 4))], lambda a, b: tc.div(a, b)),
    "neg_pow": (lambda r: [_pos(r, (5,))], lambda a: -(a ** 3) + a ** 0.5),
    "exp": (lambda r: [r.normal(size=(5,))], tc.exp),
    "log": (lambda r: [_pos(r, (5,))], tc.log),
    "tanh": (lambda r: [r.normal(size=(5,))], tc.tanh),
    "sigmoid": (lambda r: [r.normal(size=(5,))], tc.sigmoid),
    "relu": (lambda r: [_away_from(r, (6,), 0.0)], tc.relu),
    "leaky_relu": (lambda r: [_away_from(r, (6,), 0.0)], tc.leaky_relu),
    "maximum": (lambda r: [_away_from(r, (6,), 0.3)], lambda a: tc.maximum(a, 0.3)),
    "sum_axis": (lambda r: [r.normal(size=(3, 4))], lambda a: tc.tsum(a, axis=1)),
    "mean": (lambda r: [r.normal(size=(3, 4))], lambda a: tc.mean(a, axis=0, keepdims=True)),
    "reshape": (lambda r: [r.normal(size=(3, 4))], lambda a: tc.reshape(a, (2, 6))),
    "transpose": (lambda r: [r.normal(size=(2, 3, 4))], lambda a: tc.transpose(a, (2, 0, 1))),
    "getitem": (lambda r: [r.normal(size=(4, 5))], lambda a: a[1:3, ::2]),
    "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))], lambda a, b: tc.concat([a, b], 0)),
    "stack": (lambda r: [r.normal(size=(3,)), r.normal(size=(3,))], lambda a, b: tc.stack([a, b], 1)),
    "matmul_mv": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: tc.matmul(a, b)),
    "matmul_mm": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], lambda a, b: a @ b),
    "softmax": (lambda r: [r.normal(size=(2, 3, 3))], lambda a: tc.softmax(a, (1, 2))),
    "log_softmax": (lambda r: [r.normal(size=(3, 5))], lambda a: tc.log_softmax(a, axis=-1)),
    "channel_softmax": (lambda r: [r.normal(size=(2, 4, 4))], tc.channel_softmax),
    "conv2d": (lambda r: [r.normal(size=(2, 5, 5)), r.normal(size=(3, 2, 3, 3))],
               lambda x, w: tc.conv2d(x, w, 2, 1)),
    "deconv2d": (lambda r: [r.normal(size=(2, 3, 3)), r.normal(size=(2, 3, 4, 4))],
                 lambda x, w: tc.deconv2d(x, w, 2, 1)),
}


def _loss_ops():
    return sorted(OPS) + ["kl_loss", "bce", "cross_entropy", "sparse_apply"]


@pytest.mark.parametrize("name", _loss_ops())
def test_op_gradient_fd(name):
    worst = 0.0
    for inst in range(20):
        rng = np.random.default_rng([zlib.crc32(name.encode()), inst])
        if name in OPS:
            build, op = OPS[name]
            xs = [t64(a) for a in build(rng)]
            r = Tensor(rng.normal(size=op(*xs).shape), dtype=F64)
            loss = lambda: tsum(op(*xs) * r)
        elif name == "kl_loss":
            xs = [t64(rng.normal(size=(2, 3, 3)))]
            target = rng.dirichlet(np.ones(9), size=2).reshape(2, 3, 3)
            loss = lambda: kl_loss(Tensor(target, dtype=F64), channel_softmax(xs[0]))
        elif name == "bce":
            xs = [t64(rng.uniform(0.05, 0.95, size=6))]
            y = rng.integers(0, 2, size=6)
            loss = lambda: tc.binary_cross_entropy(xs[0], y)
        elif name == "cross_entropy":
            xs = [t64(rng.normal(size=7))]
            label = int(rng.integers(0, 7))
            loss = lambda: tc.cross_entropy(xs[0], label)
        else:
            m = sp.random(5, 12, density=0.4, random_state=int(rng.integers(1 << 30)), format="csr")
            xs = [t64(rng.normal(size=(2, 12)))]
            r = Tensor(rng.normal(size=(2, 5)), dtype=F64)
            loss = lambda: tsum(tc.sparse_apply(xs[0], m) * r)
        worst = max(worst, check(loss, xs))
    assert worst < 1e-4
