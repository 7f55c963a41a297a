import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jbot import tensor as T
from jbot.tensor import Tensor


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 3))
    out = T.matmul(Tensor(np.eye(3), dtype=np.float64), Tensor(a, dtype=np.float64))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_of_zeros_is_uniform():
    p = T.softmax(Tensor([0.0, 0.0, 0.0]), temperature=1.0)
    np.testing.assert_allclose(p.data, [1 / 3] * 3, rtol=1e-7)


def test_gelu_zero():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0


@pytest.mark.parametrize("temperature", [0.04, 0.1, 1.0])
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_softmax_is_a_distribution(temperature, seed):
    x = np.random.default_rng(seed).standard_normal((5, 7)) * 3
    p = T.softmax(Tensor(x), temperature=temperature).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_mask_gives_exact_zero(rng):
    x = rng.standard_normal((2, 4))
    allow = np.array([[1, 1, 0, 1], [1, 0, 0, 0]], bool)
    p = T.softmax(Tensor(x, dtype=np.float64), mask=allow).data
    assert (p[~allow] == 0).all()
    assert p[1, 0] == 1.0


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(T.ShapeError) as exc:
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert exc.value.primitive == "add"
    assert exc.value.shapes == ((2, 3), (3, 2))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_leading_dimension_expansion_only():
    T.add(Tensor(np.zeros((4, 2, 3))), Tensor(np.zeros(3)))
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.zeros((4, 2, 3))), Tensor(np.zeros((4, 1, 3))))


# ---------------------------------------------------------------------------
# backward


def test_square_gradient(f64):
    x = Tensor([3.0], requires_grad=True)
    T.backward((x * x).sum())
    assert x.grad[0] == 6.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * 2.0)


def test_layer_norm_shift_invariance(f64, rng):
    x = Tensor(rng.standard_normal((3, 5)) + 7.0, requires_grad=True)
    gamma, beta = Tensor(np.ones(5)), Tensor(np.zeros(5))
    T.backward(T.layer_norm(x, gamma, beta).sum())
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-9)


def test_softmax_cross_entropy_matches_finite_differences(rng):
    onehot = np.eye(5)[2]

    def fn(x):
        return -(Tensor(onehot, dtype=x.dtype) * T.log(T.softmax(x))).sum()

    (err,) = T.check_gradients(fn, [rng.standard_normal(5)])
    assert err < 1e-4


def test_shared_subexpression_accumulates(f64, rng):
    # y = f(x) used twice must equal the unrolled version with two copies
    x0 = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 4))

    x = Tensor(x0, requires_grad=True)
    h = T.gelu(T.matmul(x, Tensor(w)))
    T.backward((h * h + h).sum())

    a = Tensor(x0, requires_grad=True)
    b = Tensor(x0, requires_grad=True)
    c = Tensor(x0, requires_grad=True)
    ha = T.gelu(T.matmul(a, Tensor(w)))
    hb = T.gelu(T.matmul(b, Tensor(w)))
    hc = T.gelu(T.matmul(c, Tensor(w)))
    T.backward((ha * hb + hc).sum())
    np.testing.assert_allclose(x.grad, a.grad + b.grad + c.grad, rtol=1e-12)


def test_each_node_visited_once(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * 2.0
    z = y + y
    order = T._topological(z.sum())
    assert len(order) == len({id(n) for n in order})
    T.backward(z.sum())
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_stop_gradient(f64, rng):
    a = Tensor(rng.standard_normal(3), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    s = T.stop_gradient(a)
    np.testing.assert_array_equal(s.data, a.data)
    T.backward((s * b).sum())
    assert a.grad is None
    np.testing.assert_array_equal(b.grad, a.data)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_log_clamp_has_zero_gradient_below_floor(f64):
    x = Tensor([1e-20, 0.5], requires_grad=True)
    out = T.log(x, min_value=1e-12)
    assert out.data[0] == pytest.approx(np.log(1e-12))
    T.backward(out.sum())
    assert x.grad[0] == 0.0 and x.grad[1] == pytest.approx(2.0)


def test_dropout_is_inverted_and_off_in_eval(f64):
    x = Tensor(np.ones((200, 50)))
    y = T.dropout(x, 0.2, np.random.default_rng(0), training=True)
    kept = y.data[y.data > 0]
    np.testing.assert_allclose(kept, 1.25)
    assert abs((y.data == 0).mean() - 0.2) < 0.01
    assert T.dropout(x, 0.2, None, training=False) is x


# ---------------------------------------------------------------------------
# gradient checks for every differentiable primitive


def _unary(op):
    return lambda a: (op(a) * Tensor(np.linspace(-1, 1, a.size).reshape(a.shape), dtype=a.dtype)).sum()


def _weights(t):
    return Tensor(np.sin(np.arange(t.size) + 0.3).reshape(t.shape), dtype=t.dtype)


def _weighted(t):
    return (t * _weights(t)).sum()


PRIMITIVES = {
    "add": (lambda a, b: _weighted(a + b), [(3, 4), (4,)]),
    "sub": (lambda a, b: _weighted(a - b), [(2, 3, 4), (3, 4)]),
    "mul": (lambda a, b: _weighted(a * b), [(3, 4), (3, 4)]),
    "div": (lambda a, b: _weighted(a / (b * b + 1.0)), [(3, 4), (3, 4)]),
    "scale": (lambda a: _weighted(T.scale(a, -1.7)), [(4, 3)]),
    "exp": (lambda a: _weighted(T.exp(a)), [(3, 4)]),
    "log": (lambda a: _weighted(T.log(a * a + 0.5)), [(3, 4)]),
    "sqrt": (lambda a: _weighted(T.sqrt(a * a + 0.5)), [(3, 4)]),
    "square": (lambda a: _weighted(T.square(a)), [(2, 2)]),
    "gelu": (lambda a: _weighted(T.gelu(a)), [(4, 4)]),
    "matmul": (lambda a, b: _weighted(a @ b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: _weighted(a @ b), [(2, 3, 4), (2, 4, 3)]),
    "transpose": (lambda a: _weighted(T.transpose(a)), [(3, 4)]),
    "permute": (lambda a: _weighted(T.permute(a, (2, 0, 1))), [(2, 3, 4)]),
    "reshape": (lambda a: _weighted(T.reshape(a, (4, 3))), [(3, 4)]),
    "broadcast_to": (lambda a: _weighted(T.broadcast_to(a, (3, 2, 4))), [(2, 4)]),
    "concat": (lambda a, b: _weighted(T.concat([a, b], axis=1)), [(3, 2), (3, 4)]),
    "getitem": (lambda a: _weighted(a[np.array([0, 2, 2]), 1:]), [(4, 4)]),
    "sum": (lambda a: _weighted(T.sum_(a, axis=1)), [(3, 4)]),
    "mean": (lambda a: _weighted(T.mean(a, axis=0, keepdims=True)), [(3, 4)]),
    "min": (lambda a: _weighted(T.min_(a, axis=1)), [(3, 4)]),
    "norm": (lambda a: _weighted(T.norm(a, axis=-1)), [(3, 4)]),
    "l2_normalize": (lambda a: _weighted(T.l2_normalize(a)), [(3, 4)]),
    "softmax": (lambda a: _weighted(T.softmax(a, temperature=0.7)), [(3, 4)]),
    "softmax_masked": (
        lambda a: _weighted(T.softmax(a, mask=np.array([1, 0, 1, 1], bool))), [(3, 4)]
    ),
    "layer_norm": (lambda a, g, b: _weighted(T.layer_norm(a, g, b)), [(3, 4), (4,), (4,)]),
    "pairwise_distance": (lambda a, b: _weighted(T.pairwise_distance(a, b)), [(3, 4), (2, 4)]),
    "masked_fill": (
        lambda a, v: _weighted(T.masked_fill(a, np.array([[1, 0, 0], [0, 0, 1]], bool), v)),
        [(2, 3, 4), (4,)],
    ),
    "apply_mask": (lambda a: _weighted(T.apply_mask(a, np.array([[0, 2.0], [1.25, 1.25]]))), [(2, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_primitive_gradients(name, seed):
    fn, shapes = PRIMITIVES[name]
    r = np.random.default_rng(seed)
    arrays = [r.standard_normal(s) for s in shapes]
    errors = T.check_gradients(fn, arrays)
    assert max(errors) < 1e-4, (name, errors)


# ---------------------------------------------------------------------------
# serialization


def test_npy_roundtrip_is_v1_little_endian(tmp_path, rng):
    a = rng.standard_normal((3, 5)).astype(np.float32)
    path = os.path.join(tmp_path, "a.npy")
    T.save_npy(path, Tensor(a))
    with open(path, "rb") as fh:
        head = fh.read(8)
    assert head[:6] == b"\x93NUMPY" and head[6:8] == b"\x01\x00"
    back = T.load_npy(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back.data, a)
