"""Gradient checks and contracts for the reverse-mode engine."""

import numpy as np
import pytest

from tars import autodiff as ad


def rel_err(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


def numeric_grad(fn, x, h=1e-4):
    """Central differences of a scalar fn wrt one ndarray input."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# pinned examples
# ---------------------------------------------------------------------------

def test_mul_scalar_product():
    out = ad.mul(ad.Tensor([2.0]), ad.Tensor([3.0]))
    assert out.data.tolist() == [6.0]


def test_layer_norm_example():
    x = ad.Tensor([1.0, 2.0, 3.0])
    out = ad.layer_norm(x, ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_concat_example():
    out = ad.concat([ad.Tensor([1.0, 2.0]), ad.Tensor([3.0])])
    assert out.data.tolist() == [1.0, 2.0, 3.0]


def test_backward_product_rule():
    tape = ad.Tape()
    x = tape.leaf(np.array(2.0))
    y = tape.leaf(np.array(3.0))
    grads = tape.backward(ad.mul(x, y))
    assert grads[x.node] == 3.0
    assert grads[y.node] == 2.0


def test_backward_sum_square():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    grads = tape.backward(ad.tsum(ad.square(x)))
    np.testing.assert_array_equal(grads[x.node], [2.0, 4.0])


def test_backward_same_tensor_twice():
    tape = ad.Tape()
    x = tape.leaf(np.array(3.0))
    assert tape.backward(ad.sub(x, x))[x.node] == 0.0
    tape = ad.Tape()
    x = tape.leaf(np.array(3.0))
    assert tape.backward(ad.mul(x, x))[x.node] == 6.0


def test_backward_requires_scalar_root():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        tape.backward(ad.square(x))


def test_unreachable_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    y = tape.leaf(np.array([5.0]))
    grads = tape.backward(ad.tsum(ad.square(x)))
    np.testing.assert_array_equal(grads[y.node], [0.0])


def test_detached_tensor_never_recorded():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0]))
    c = ad.Tensor([4.0])
    out = ad.mul(x, c)
    assert out.node is not None and c.node is None
    out2 = ad.mul(ad.Tensor([2.0]), ad.Tensor([3.0]))
    assert out2.node is None


def test_fd_oracle_examples():
    store = ad.ParamStore()
    store.add("theta", np.array(3.0))
    g = ad.finite_difference_gradient(lambda s: float(s["theta"].value ** 2), store)
    assert abs(g["theta"] - 6.0) < 1e-6

    store2 = ad.ParamStore()
    store2.add("theta", np.array(0.0))
    g2 = ad.finite_difference_gradient(lambda s: float(np.sin(s["theta"].value)), store2)
    assert abs(g2["theta"] - 1.0) < 1e-6


def test_adam_examples():
    store = ad.ParamStore()
    store.add("w", np.array([1.0, -2.0]))
    ad.adam_step(store, lr=0.1)  # zero grads: values unchanged
    np.testing.assert_array_equal(store["w"].value, [1.0, -2.0])

    store = ad.ParamStore()
    store.add("theta", np.array(0.0))
    store["theta"].grad[...] = 1.0
    ad.adam_step(store, lr=0.1)
    assert abs(store["theta"].value - (-0.1)) < 1e-8
    assert np.all(store["theta"].grad == 0.0)

    ad.adam_step(store, lr=0.1)
    assert store.step_count == 2


def test_adam_nonfinite_grad_names_parameter():
    store = ad.ParamStore()
    store.add("bad/param", np.zeros(2))
    store["bad/param"].grad[...] = np.nan
    with pytest.raises(FloatingPointError, match="bad/param"):
        ad.adam_step(store, lr=0.1)


def test_shape_mismatch_message_names_op():
    with pytest.raises(ValueError, match="matmul"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match="add"):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4,))))


# ---------------------------------------------------------------------------
# per-primitive gradient checks: 100 random shapes/inputs per op
# ---------------------------------------------------------------------------

def _away_from_kinks(rng, shape, kink=0.0, margin=5e-2):
    x = rng.uniform(-2.0, 2.0, shape)
    bad = np.abs(x - kink) < margin
    x[bad] = kink + margin * np.sign(x[bad] - kink + 0.5)
    return x


def _random_shape(rng):
    rank = rng.integers(1, 3)
    return tuple(int(rng.integers(1, 5)) for _ in range(rank))


UNARY_SMOOTH = ["square", "softplus", "sigmoid", "tanh", "sin", "cos"]


@pytest.mark.parametrize("kind", UNARY_SMOOTH)
def test_gradcheck_unary_smooth(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for _ in range(100):
        shape = _random_shape(rng)
        x = rng.uniform(-2.0, 2.0, shape)
        tape = ad.Tape()
        xt = tape.leaf(x)
        loss = ad.tsum(ad.forward_primitive(kind, xt))
        g = tape.backward(loss)[xt.node]
        g_fd = numeric_grad(
            lambda v: ad.tsum(ad.forward_primitive(kind, ad.Tensor(v))).item(), x)
        assert rel_err(g, g_fd) < 1e-3


@pytest.mark.parametrize("kind", ["abs", "relu"])
def test_gradcheck_unary_kinked(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for _ in range(100):
        x = _away_from_kinks(rng, _random_shape(rng))
        tape = ad.Tape()
        xt = tape.leaf(x)
        g = tape.backward(ad.tsum(ad.forward_primitive(kind, xt)))[xt.node]
        g_fd = numeric_grad(
            lambda v: ad.tsum(ad.forward_primitive(kind, ad.Tensor(v))).item(), x)
        assert rel_err(g, g_fd) < 1e-3


def test_gradcheck_sqrt():
    rng = np.random.default_rng(11)
    for _ in range(100):
        x = rng.uniform(0.1, 3.0, _random_shape(rng))
        tape = ad.Tape()
        xt = tape.leaf(x)
        g = tape.backward(ad.tsum(ad.sqrt(xt)))[xt.node]
        g_fd = numeric_grad(lambda v: ad.tsum(ad.sqrt(ad.Tensor(v))).item(), x)
        assert rel_err(g, g_fd) < 1e-3


def test_gradcheck_max_const():
    rng = np.random.default_rng(12)
    for _ in range(100):
        c = float(rng.uniform(-1, 1))
        x = _away_from_kinks(rng, _random_shape(rng), kink=c)
        tape = ad.Tape()
        xt = tape.leaf(x)
        g = tape.backward(ad.tsum(ad.max_const(xt, c)))[xt.node]
        g_fd = numeric_grad(
            lambda v: ad.tsum(ad.max_const(ad.Tensor(v), c)).item(), x)
        assert rel_err(g, g_fd) < 1e-3


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_gradcheck_binary_broadcast(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for trial in range(100):
        b_shape = _random_shape(rng)
        lead = tuple(int(rng.integers(1, 4)) for _ in range(rng.integers(0, 2)))
        a_shape = lead + b_shape
        if trial % 3 == 0:
            a_shape, b_shape = b_shape, a_shape  # broadcast the other way
        a = rng.uniform(-2, 2, a_shape)
        b = rng.uniform(-2, 2, b_shape)
        tape = ad.Tape()
        at, bt = tape.leaf(a), tape.leaf(b)
        grads = tape.backward(ad.tsum(ad.square(ad.forward_primitive(kind, at, bt))))
        for t, arr, other_first in ((at, a, False), (bt, b, True)):
            def f(v):
                args = (ad.Tensor(b), ad.Tensor(v)) if other_first else (ad.Tensor(v), ad.Tensor(b))
                if other_first:
                    args = (ad.Tensor(a), ad.Tensor(v))
                return ad.tsum(ad.square(ad.forward_primitive(kind, *args))).item()
            assert rel_err(grads[t.node], numeric_grad(f, arr)) < 1e-3


def test_gradcheck_matmul():
    rng = np.random.default_rng(21)
    for _ in range(100):
        n, k, m = (int(rng.integers(1, 5)) for _ in range(3))
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        tape = ad.Tape()
        at, bt = tape.leaf(a), tape.leaf(b)
        grads = tape.backward(ad.tsum(ad.square(ad.matmul(at, bt))))
        fa = lambda v: ad.tsum(ad.square(ad.matmul(ad.Tensor(v), ad.Tensor(b)))).item()
        fb = lambda v: ad.tsum(ad.square(ad.matmul(ad.Tensor(a), ad.Tensor(v)))).item()
        assert rel_err(grads[at.node], numeric_grad(fa, a)) < 1e-3
        assert rel_err(grads[bt.node], numeric_grad(fb, b)) < 1e-3


@pytest.mark.parametrize("axis", [None, -1])
def test_gradcheck_reductions(axis):
    rng = np.random.default_rng(31)
    for _ in range(100):
        x = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5))))
        for red in (ad.tsum, ad.tmean):
            tape = ad.Tape()
            xt = tape.leaf(x)
            out = red(xt, axis=axis)
            loss = ad.tsum(ad.square(out)) if axis == -1 else ad.square(out)
            g = tape.backward(loss)[xt.node]

            def f(v):
                o = red(ad.Tensor(v), axis=axis)
                return (ad.tsum(ad.square(o)) if axis == -1 else ad.square(o)).item()

            assert rel_err(g, numeric_grad(f, x)) < 1e-3


def test_gradcheck_concat_slice_reshape_scale():
    rng = np.random.default_rng(41)
    for _ in range(100):
        a = rng.normal(size=(2, int(rng.integers(1, 4))))
        b = rng.normal(size=(2, int(rng.integers(1, 4))))
        c = float(rng.normal())
        tape = ad.Tape()
        at, bt = tape.leaf(a), tape.leaf(b)
        cat = ad.concat([at, bt])
        w = cat.shape[-1]
        lo = int(rng.integers(0, w))
        hi = int(rng.integers(lo + 1, w + 1))
        out = ad.scale(ad.reshape(ad.slice_last(cat, lo, hi), (-1,)), c)
        grads = tape.backward(ad.tsum(ad.square(out)))

        def f_on(v, which):
            parts = [ad.Tensor(v), ad.Tensor(b)] if which == 0 else [ad.Tensor(a), ad.Tensor(v)]
            o = ad.scale(ad.reshape(ad.slice_last(ad.concat(parts), lo, hi), (-1,)), c)
            return ad.tsum(ad.square(o)).item()

        assert rel_err(grads[at.node], numeric_grad(lambda v: f_on(v, 0), a)) < 1e-3
        assert rel_err(grads[bt.node], numeric_grad(lambda v: f_on(v, 1), b)) < 1e-3


def test_gradcheck_layer_norm():
    rng = np.random.default_rng(51)
    for _ in range(100):
        d = int(rng.integers(1, 6))
        x = rng.normal(size=(int(rng.integers(1, 4)), d))
        gain = rng.normal(size=d)
        bias = rng.normal(size=d)
        tape = ad.Tape()
        xt, gt, bt = tape.leaf(x), tape.leaf(gain), tape.leaf(bias)
        grads = tape.backward(ad.tsum(ad.square(ad.layer_norm(xt, gt, bt))))

        def f(v, slot):
            args = [ad.Tensor(x), ad.Tensor(gain), ad.Tensor(bias)]
            args[slot] = ad.Tensor(v)
            return ad.tsum(ad.square(ad.layer_norm(*args))).item()

        assert rel_err(grads[xt.node], numeric_grad(lambda v: f(v, 0), x)) < 1e-3
        assert rel_err(grads[gt.node], numeric_grad(lambda v: f(v, 1), gain)) < 1e-3
        assert rel_err(grads[bt.node], numeric_grad(lambda v: f(v, 2), bias)) < 1e-3


# ---------------------------------------------------------------------------
# whole-network grad check, determinism, linearity
# ---------------------------------------------------------------------------

def _random_mlp_loss(store, x):
    """3-layer MLP with layer-norm + relu, scalar mean-square output."""
    tape = ad.Tape()
    p = store.watch_all(tape)
    h = ad.Tensor(x)
    for i in range(3):
        h = ad.add(ad.matmul(h, p[f"w{i}"]), p[f"b{i}"])
        if i < 2:
            h = ad.relu(ad.layer_norm(h, p[f"g{i}"], p[f"be{i}"]))
    loss = ad.tmean(ad.square(h))
    return tape, p, loss


def _make_mlp_store(rng, dims):
    store = ad.ParamStore()
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        store.add(f"w{i}", rng.normal(size=(a, b)) / np.sqrt(a))
        store.add(f"b{i}", rng.normal(size=b) * 0.1)
        if i < 2:
            store.add(f"g{i}", 1.0 + 0.1 * rng.normal(size=b))
            store.add(f"be{i}", 0.1 * rng.normal(size=b))
    return store


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(61)
    dims = [3, 6, 5, 1]
    store = _make_mlp_store(rng, dims)
    x = rng.normal(size=(4, 3))
    tape, p, loss = _random_mlp_loss(store, x)
    grads = tape.backward(loss)
    store.accumulate_grads(p, grads)

    def f(s):
        _, _, l = _random_mlp_loss(s, x)
        return l.item()

    fd = ad.finite_difference_gradient(f, store, h=1e-4)
    for name in store.names():
        assert rel_err(store[name].grad, fd[name]) < 1e-3, name


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(71)
    store = _make_mlp_store(rng, [3, 6, 5, 1])
    x = rng.normal(size=(4, 3))
    results = []
    for _ in range(2):
        tape, p, loss = _random_mlp_loss(store, x)
        grads = tape.backward(loss)
        results.append({n: grads[p[n].node].copy() for n in store.names()})
    for n in store.names():
        assert np.array_equal(results[0][n], results[1][n])


def test_gradient_linearity():
    rng = np.random.default_rng(81)
    tape = ad.Tape()
    x = tape.leaf(rng.normal(size=(5,)))
    l1 = ad.tmean(ad.square(x))
    l2 = ad.tsum(ad.tabs(x))
    g1 = tape.backward(l1)[x.node]
    g2 = tape.backward(l2)[x.node]
    g12 = tape.backward(ad.add(l1, l2))[x.node]
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_param_store_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(91)
    store = ad.ParamStore()
    store.add("layer/weight", rng.normal(size=(4, 3)))
    store.add("layer/bias", rng.normal(size=(3,)))
    store.add("scalarish", np.array(0.1 + np.pi))
    store["layer/weight"].adam_m[...] = rng.normal(size=(4, 3))
    store["layer/weight"].adam_v[...] = np.abs(rng.normal(size=(4, 3)))
    store.step_count = 1234

    path = tmp_path / "ckpt.tarsckpt"
    ad.save_param_store(store, path)
    loaded = ad.load_param_store(path)

    assert loaded.step_count == 1234
    assert loaded.names() == store.names()
    for name in store.names():
        for attr in ("value", "adam_m", "adam_v"):
            a = getattr(store[name], attr)
            b = getattr(loaded[name], attr)
            assert a.shape == b.shape
            assert np.array_equal(a.view(np.uint64), b.view(np.uint64)), name

    # saving the loaded store reproduces identical bytes
    path2 = tmp_path / "ckpt2.tarsckpt"
    ad.save_param_store(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()
    assert path.read_bytes()[:8] == b"TARSCKPT"


def test_multi_store_roundtrip(tmp_path):
    rng = np.random.default_rng(92)
    stores = {}
    for name in ("encoder", "renderer"):
        s = ad.ParamStore()
        s.add("w", rng.normal(size=(2, 2)))
        s.step_count = 7
        stores[name] = s
    path = tmp_path / "multi.tarsckpt"
    ad.save_param_stores(stores, path)
    loaded = ad.load_param_stores(path)
    assert set(loaded) == {"encoder", "renderer"}
    assert np.array_equal(loaded["encoder"]["w"].value, stores["encoder"]["w"].value)
    assert loaded["renderer"].step_count == 7
