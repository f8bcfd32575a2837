import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import gspeech.numerics as nx
from gspeech.numerics import NamedTensorStore, Tensor, grad_check


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_scalar():
    rng = np.random.default_rng(0)
    b = rng.normal(size=(3, 2))
    assert np.array_equal(nx.matmul(np.eye(3), b).data, b)
    assert nx.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


@pytest.mark.parametrize("seed", range(5))
def test_matmul_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 17, size=3)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    ref = naive_matmul(a, b)
    got = nx.matmul(a, b).data
    assert np.allclose(got, ref, rtol=1e-6, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(nx.ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative_with_identity():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 5))
    i = np.eye(5)
    left = nx.matmul(nx.matmul(a, i), a).data
    right = nx.matmul(a, nx.matmul(i, a)).data
    assert np.allclose(left, right, rtol=1e-6)


def test_softmax_uniform_and_shift():
    assert np.allclose(nx.softmax(np.zeros(3)).data, [1 / 3] * 3)
    big = nx.softmax(np.array([1e4, 1e4, 1e4])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, 1 / 3)


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 40
    es = [mpmath.e ** mpmath.mpf(v) for v in (1, 2, 3)]
    ref = [float(e / sum(es)) for e in es]
    assert np.allclose(nx.softmax(np.array([1.0, 2.0, 3.0])).data, ref, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_sum_and_shift_invariance(xs, c):
    x = np.array(xs)
    p = nx.softmax(x).data
    assert abs(p.sum() - 1) <= 1e-6
    assert np.all(p > 0)
    assert np.allclose(nx.softmax(x + c).data, p, atol=1e-6)


def test_layer_norm_cases():
    d = 6
    g, b = np.ones(d), np.zeros(d)
    assert np.allclose(nx.layer_norm(np.full((1, d), 3.0), g, b).data, 0.0)
    x = np.array([[-1.0, 1.0, -1.0, 1.0]])
    assert np.allclose(nx.layer_norm(x, np.ones(4), np.zeros(4), eps=1e-12).data, x, atol=1e-6)
    rng = np.random.default_rng(1)
    y = nx.layer_norm(rng.normal(3, 5, size=(4, 16)), np.ones(16), np.zeros(16), eps=1e-8).data
    assert np.all(np.abs(y.mean(-1)) <= 1e-6)
    assert np.all(np.abs(y.var(-1) - 1) <= 1e-4)


def direct_conv(x, k):
    T, d = x.shape
    kk = k.shape[0]
    pad = kk // 2
    out = np.zeros_like(x)
    for t in range(T):
        for c in range(d):
            for j in range(kk):
                s = t + j - pad
                if 0 <= s < T:
                    out[t, c] += k[j, c] * x[s, c]
    return out


def test_depthwise_conv():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(9, 4))
    delta = np.zeros((3, 4))
    delta[1] = 1.0
    assert np.array_equal(nx.depthwise_conv1d(x, delta).data, x)
    k = rng.normal(size=(3, 4))
    assert np.allclose(nx.depthwise_conv1d(x, k).data, direct_conv(x, k), atol=1e-12)
    # full-scale kernel size accepted
    y = nx.depthwise_conv1d(np.zeros((20, 1024)), np.zeros((15, 1024)))
    assert y.shape == (20, 1024)
    with pytest.raises(ValueError):
        nx.depthwise_conv1d(x, np.zeros((4, 4)))


# ------------------------------------------------------------------ gradients

def _weights(shape, rng):
    return rng.normal(size=shape)


def test_grad_check_linear_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert grad_check(lambda: x.sum(), x) <= 1e-10


def test_grad_check_rejects_non_scalar():
    x = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        grad_check(lambda: x * 2.0, x)


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(4)
    logits = Tensor(rng.normal(size=(5, 7)))
    tgt = rng.integers(0, 7, size=5)

    def f():
        lp = nx.log_softmax(logits)
        return -lp[np.arange(5), tgt].mean()

    assert grad_check(f, logits) <= 1e-4


def _unary_cases():
    return {
        "exp": lambda t: nx.exp(t),
        "log": lambda t: nx.log(nx.exp(t) + 1.0),
        "tanh": nx.tanh,
        "sigmoid": nx.sigmoid,
        "silu": nx.silu,
        "softmax": lambda t: nx.softmax(t, -1),
        "log_softmax": lambda t: nx.log_softmax(t, -1),
        "glu": lambda t: nx.glu(nx.concat([t, t * 0.5], axis=-1)),
        "transpose": lambda t: t.T,
        "reshape": lambda t: t.reshape(-1),
        "power": lambda t: (t * t + 1.0) ** 1.5,
        "sum_axis": lambda t: t.sum(axis=0),
        "mean_axis": lambda t: t.mean(axis=1, keepdims=True),
        "getitem": lambda t: t[np.array([0, 0, 1])],
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_elementary_op_gradients(name):
    op = _unary_cases()[name]
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(2, 9, size=2))
        x = Tensor(rng.normal(size=shape))
        w = _weights(op(Tensor(x.data)).shape, rng)
        worst = max(worst, grad_check(lambda: (op(x) * w).sum(), x))
    assert worst <= 1e-4, worst


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "matmul", "concat", "stack"])
def test_binary_op_gradients(name):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        m, n, k = rng.integers(1, 9, size=3)
        a = Tensor(rng.normal(size=(m, n)))
        if name == "matmul":
            b = Tensor(rng.normal(size=(n, k)))
            op = nx.matmul
        elif name == "concat":
            b = Tensor(rng.normal(size=(k, n)))
            op = lambda u, v: nx.concat([u, v], axis=0)
        elif name == "stack":
            b = Tensor(rng.normal(size=(m, n)))
            op = lambda u, v: nx.stack([u, v], axis=1)
        else:
            # broadcast a row vector to exercise unbroadcast
            b = Tensor(rng.normal(size=(1, n)) + (3.0 if name == "div" else 0.0))
            op = getattr(nx, name)
        w = _weights(op(Tensor(a.data), Tensor(b.data)).shape, rng)
        worst = max(worst, grad_check(lambda: (op(a, b) * w).sum(), [a, b]))
    assert worst <= 1e-4, worst


def test_layer_norm_and_conv_gradients():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        T, d = rng.integers(2, 9, size=2)
        x = Tensor(rng.normal(size=(T, d)))
        g = Tensor(rng.normal(size=d))
        b = Tensor(rng.normal(size=d))
        k = Tensor(rng.normal(size=(3, d)))
        w = rng.normal(size=(T, d))
        worst = max(worst, grad_check(lambda: (nx.layer_norm(x, g, b) * w).sum(), [x, g, b]))
        worst = max(worst, grad_check(lambda: (nx.depthwise_conv1d(x, k, b) * w).sum(), [x, k, b]))
    assert worst <= 1e-4, worst


def test_shared_consumer_accumulates():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 3)))

    def f():
        h = nx.tanh(x)
        return (nx.matmul(h, h) * x).sum() + nx.exp(h).sum()

    assert grad_check(f, x) <= 1e-6


def test_backward_visits_each_node_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * 3.0
    z = y + y + y
    z.sum().backward()
    assert x.grad.tolist() == [9.0]


def test_dropout_seeded_and_disabled():
    x = Tensor(np.ones((4, 4)))
    assert nx.dropout(x, 0.0, np.random.default_rng(0)) is x
    a = nx.dropout(x, 0.5, np.random.default_rng(7)).data
    b = nx.dropout(x, 0.5, np.random.default_rng(7)).data
    assert np.array_equal(a, b)


def test_no_nan_on_finite_inputs():
    rng = np.random.default_rng(9)
    x = rng.normal(scale=80, size=(6, 6))
    for out in (nx.softmax(x), nx.log_softmax(x), nx.sigmoid(x), nx.silu(x), nx.tanh(x)):
        assert np.all(np.isfinite(out.data))


# ------------------------------------------------------------------ store

def test_store_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    st_ = NamedTensorStore({
        "enc.layer0.ff1.w": rng.normal(size=(4, 8)),
        "adapter.queries": rng.normal(size=(3, 5)),
        "scalar": np.array(1.5),
        "ünïcode": rng.normal(size=(2, 2, 2)),
    })
    path = tmp_path / "x.gspc"
    st_.save(path)
    blob = path.read_bytes()
    assert blob[:4] == b"GSPC"
    back = NamedTensorStore.load(path)
    assert list(back) == list(st_)
    for k in st_:
        assert back[k].dtype == np.float32
        assert back[k].tobytes() == st_[k].tobytes()
    assert back.to_bytes() == blob


def test_store_layout_header():
    st_ = NamedTensorStore({"ab": np.array([[1.0, 2.0]])})
    blob = st_.to_bytes()
    import struct
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<I", blob, 12) == (2,)
    assert blob[16:18] == b"ab"
    assert struct.unpack_from("<BB", blob, 18) == (0, 2)
    assert struct.unpack_from("<II", blob, 20) == (1, 2)
    assert struct.unpack_from("<2f", blob, 28) == (1.0, 2.0)


def test_store_errors():
    with pytest.raises(nx.StoreFormatError):
        NamedTensorStore.from_bytes(b"XXXX" + bytes(8))
    st_ = NamedTensorStore({"a": np.zeros((2, 2))})
    with pytest.raises(nx.MissingTensorError, match="'b'"):
        st_.require("b", (2, 2))
    with pytest.raises(nx.MissingTensorError, match="shape"):
        st_.require("a", (3, 2))


def test_triangular_schedule_shape():
    s = nx.TriangularSchedule(total_steps=200, warmup_steps=60, lr_start=1e-4, lr_peak=1e-3, lr_end=1e-5)
    assert s(0) == pytest.approx(1e-4)
    assert s(60) == pytest.approx(1e-3)
    assert s(200) == pytest.approx(1e-5)
    lrs = [s(i) for i in range(201)]
    assert all(a <= b for a, b in zip(lrs[:60], lrs[1:61]))
    assert all(a >= b for a, b in zip(lrs[60:], lrs[61:]))


def test_adamw_reduces_quadratic():
    store = NamedTensorStore({"w": np.array([3.0, -2.0])})
    opt = nx.AdamW(["w"], weight_decay=0.0)
    for _ in range(300):
        opt.step(store, {"w": 2 * store["w"].astype(np.float64)}, lr=0.05)
    assert np.all(np.abs(store["w"]) < 0.05)
