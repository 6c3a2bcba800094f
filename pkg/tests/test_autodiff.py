import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from powerformer import autodiff as ad
from powerformer.errors import CheckpointError, MissingGrad, NonScalarLoss, ShapeMismatch


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_grads(build, *arrays, tol=1e-6):
    """``build(*tensors)`` returns a scalar tensor; compare every input gradient."""
    ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*ts)
    ad.backward(loss, ts)
    for t in ts:
        num = numeric_grad(lambda: float(build(*[ad.Tensor(x.data) for x in ts]).data), t.data)
        scale = max(1.0, np.abs(num).max())
        assert np.abs(t.grad - num).max() / scale < tol


def weighted(t, rng_seed=0):
    w = np.random.default_rng(rng_seed).standard_normal(t.shape)
    return ad.sum(ad.mul(t, ad.Tensor(w)))


def test_elementwise_grads(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    check_grads(lambda x, y: weighted(ad.add(x, y)), a, b)
    check_grads(lambda x, y: weighted(ad.mul(x, y)), a, b)
    check_grads(lambda x, y: weighted(x - y), a, b)
    check_grads(lambda x: weighted(ad.relu(x)), a + 0.05 * np.sign(a))
    check_grads(lambda x: weighted(ad.scale(ad.neg(x), 3.0)), a)


def test_matmul_grads(rng):
    check_grads(lambda x, w: weighted(ad.matmul(x, w)), rng.standard_normal((2, 5, 3)), rng.standard_normal((3, 4)))
    check_grads(lambda x, w: weighted(ad.matmul(x, w)), rng.standard_normal((4, 2, 5, 3)),
                rng.standard_normal((2, 3, 4)))
    check_grads(lambda x: weighted(ad.transpose(x)), rng.standard_normal((2, 3, 4)))


def test_grouped_and_sparse_grads(rng):
    check_grads(lambda x, w: weighted(ad.grouped_matmul(x, w)), rng.standard_normal((3, 2, 5, 4)),
                rng.standard_normal((3, 4, 2)))
    S = ad.SparseOperator(sp.random(5, 5, density=0.4, random_state=1) + sp.identity(5))
    check_grads(lambda x: weighted(ad.spmm(S, x)), rng.standard_normal((2, 3, 5, 4)))


def test_reduction_and_shape_grads(rng):
    x = rng.standard_normal((3, 4, 5))
    check_grads(lambda t: weighted(ad.sum(t, axis=1)), x)
    check_grads(lambda t: weighted(ad.mean(t, axis=0, keepdims=True)), x)
    check_grads(lambda t: weighted(ad.mean_pool(t)), x)
    check_grads(lambda t: weighted(ad.moveaxis(t, 0, -1)), x)
    check_grads(lambda t: weighted(ad.reshape(t, (12, 5))), x)
    check_grads(lambda t: weighted(ad.index(t, (np.arange(3), np.array([0, 2, 1])))), x)
    check_grads(lambda a, b: weighted(ad.concat([a, b], axis=-1)), x, rng.standard_normal((3, 4, 2)))


def test_softmax_and_mse(rng):
    x = rng.standard_normal((4, 3, 2))
    check_grads(lambda t: weighted(ad.softmax(t, axis=0)), x)
    check_grads(lambda p, q: ad.mse(p, q), x, rng.standard_normal((4, 3, 2)))
    s = ad.softmax(ad.Tensor(x * 50), axis=0).data
    np.testing.assert_allclose(s.sum(axis=0), 1.0, atol=1e-12)


def test_reuse_accumulates():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = ad.sum(ad.add(ad.mul(x, x), x))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_needs_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarLoss):
        ad.backward(ad.mul(x, x))


def test_unreached_params_get_zero_grad():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.Tensor(np.ones(2), requires_grad=True)
    ad.backward(ad.sum(x), [x, y])
    np.testing.assert_array_equal(y.grad, 0.0)


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeMismatch):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 3))))
    with pytest.raises(ShapeMismatch):
        ad.mse(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))


def test_adam_matches_hand_update():
    store = ad.ParameterStore()
    p = store.add("w", np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.25])
    ad.adam_step(store, lr=0.1)
    # first step: m_hat = g, v_hat = g^2, so the update is lr * sign(g) (up to eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)
    assert p.grad is None
    with pytest.raises(MissingGrad):
        ad.adam_step(store)


def test_adam_clip():
    store = ad.ParameterStore()
    p = store.add("w", np.zeros(2))
    p.grad = np.array([30.0, 40.0])
    ad.adam_step(store, lr=1.0, max_grad_norm=5.0)
    np.testing.assert_allclose(p.data, [-1.0, -1.0], atol=1e-6)


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    store = ad.ParameterStore()
    store.add("a.w", rng.standard_normal((3, 4)))
    store.add("b", rng.standard_normal(7) * 1e-300)
    store.add("s", np.array(np.pi))
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint(path, store, meta='{"k": 1}')
    state, meta = ad.read_checkpoint(path)
    assert meta == '{"k": 1}'
    for name, p in store.params.items():
        assert state[name].tobytes() == p.data.tobytes()
    other = ad.ParameterStore()
    other.add("a.w", np.zeros((3, 4)))
    other.add("b", np.zeros(7))
    other.add("s", np.array(0.0))
    ad.load_checkpoint(path, other)
    ad.save_checkpoint(tmp_path / "again.ckpt", other, meta='{"k": 1}')
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    store = ad.ParameterStore()
    store.add("w", np.zeros((2, 2)))
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint(path, store)
    wrong = ad.ParameterStore()
    wrong.add("w", np.zeros((3, 2)))
    with pytest.raises(ShapeMismatch):
        ad.load_checkpoint(path, wrong)
    (tmp_path / "junk").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        ad.read_checkpoint(tmp_path / "junk")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        ad.read_checkpoint(path)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
def test_matmul_broadcast_property(lead, r, c, e, seed):
    rng = np.random.default_rng(seed)
    check_grads(lambda x, w: weighted(ad.matmul(x, w), seed), rng.standard_normal((lead, r, c)),
                rng.standard_normal((c, e)))
