import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from arac import tensor as T
from arac.errors import ShapeError, UsageError
from arac.gradcheck import check_gradients, random_weights
from arac.tensor import Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[3.0, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_scalar_case():
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_vs_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_broadcasts_leading_dims(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, np.matmul(a, b))


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0, 0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_large_logit_is_stable(backend):
    s = T.softmax(Tensor([1000.0, 0, 0])).data
    assert np.isfinite(s).all()
    np.testing.assert_allclose(s, [1, 0, 0], atol=1e-300)


def test_softmax_vs_high_precision(backend):
    mpmath.mp.dps = 50
    e = [mpmath.exp(v) for v in (1, 2, 3)]
    ref = [float(v / sum(e)) for v in e]
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2, 3])).data, ref, rtol=1e-15)


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        T.softmax(Tensor([0.0, np.inf]))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
                  elements=st.floats(-1e6, 1e6)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(Tensor(x)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


# -- layer norm --------------------------------------------------------------

def ln(x, eps=1e-5):
    d = np.shape(x)[-1]
    return T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps).data


def test_layer_norm_constant_row(backend):
    np.testing.assert_array_equal(ln([[5.0, 5, 5, 5]]), [[0, 0, 0, 0]])


def test_layer_norm_already_normalized(backend):
    np.testing.assert_allclose(ln([[1.0, -1]], eps=1e-14), [[1, -1]], rtol=0, atol=1e-10)


def test_layer_norm_vs_direct_formula(backend, rng):
    x = rng.normal(3.0, 2.0, size=7)
    g, b = rng.normal(size=7), rng.normal(size=7)
    mu = sum(x) / 7
    var = sum((v - mu) ** 2 for v in x) / 7
    ref = [(v - mu) / (var + 1e-5) ** 0.5 * gi + bi for v, gi, bi in zip(x, g, b)]
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-5).data
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 12)),
                  elements=st.floats(-100, 100)))
def test_layer_norm_moments(x):
    # The unit-variance law needs var >> eps; rows below 1e-2 are excluded.
    keep = x.var(axis=-1) > 1e-2
    y = ln(x, eps=1e-10)[keep]
    assert (np.abs(y.mean(axis=-1)) < 1e-9).all()
    assert (np.abs(y.var(axis=-1) - 1) < 1e-6).all()


# -- linear / pooling / misc -------------------------------------------------

def test_linear_identity():
    out = T.linear(Tensor([1.0, 2]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [1, 2])


def test_linear_sum_plus_bias():
    out = T.linear(Tensor([1.0, 1]), Tensor([[1.0], [1.0]]), Tensor([3.0]))
    assert out.data.tolist() == [5.0]


def test_linear_matches_matmul_plus_bias(rng):
    x, w, b = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=5))
    ref = T.add(T.matmul(x, w), T.expand(b, (2, 3, 5)))
    np.testing.assert_array_equal(T.linear(x, w, b).data, ref.data)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_avg_pool_basic():
    assert T.avg_pool_lastdim(Tensor([1.0, 2, 3, 4]), 2, 2).data.tolist() == [1.5, 3.5]


def test_avg_pool_identity():
    assert T.avg_pool_lastdim(Tensor([7.0]), 1, 1).data.tolist() == [7.0]


def test_avg_pool_512_by_8_window_means(rng):
    x = rng.normal(size=512)
    out = T.avg_pool_lastdim(Tensor(x), 8, 8).data
    assert out.shape == (64,)
    ref = [sum(x[8 * j:8 * j + 8]) / 8 for j in range(64)]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-14)


def test_avg_pool_overlapping_windows():
    out = T.avg_pool_lastdim(Tensor([1.0, 2, 3, 4, 5]), 3, 1).data
    assert out.tolist() == [2.0, 3.0, 4.0]


def test_avg_pool_kernel_too_large():
    with pytest.raises(ShapeError):
        T.avg_pool_lastdim(Tensor([1.0, 2]), 3, 1)


def test_sigmoid_zero_is_half():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_mean_over_rows():
    assert T.mean(Tensor([[1.0, 3], [5, 7]]), axis=0).data.tolist() == [3, 5]


def test_concat_shape_law():
    out = T.concat([Tensor(np.zeros((2, 14, 8))), Tensor(np.zeros((2, 100, 8)))], axis=1)
    assert out.shape == (2, 114, 8)


def test_binary_ops_require_equal_shapes():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros((1, 3))))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.zeros(3)), Tensor(np.zeros(2)))


def test_masked_mean():
    x = Tensor([[[1.0, 1], [9, 9]]])
    assert T.masked_mean(x, [[True, False]], axis=1).data.tolist() == [[[1.0, 1.0]]]


# -- backward ----------------------------------------------------------------

def test_backward_of_sum_is_ones(rng):
    x = leaf(rng.normal(size=(3, 2)))
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_of_square_sum(rng):
    x = leaf(rng.normal(size=5))
    loss = T.sum(T.mul(x, x))
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)
    assert loss.grad == 1.0


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(UsageError):
        T.mul(x, x).backward()


def test_backward_twice_accumulates(rng):
    x = leaf(rng.normal(size=4))
    loss = T.sum(T.mul(x, T.sigmoid(x)))
    loss.backward()
    once = x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * once)
    x.zero_grad()
    assert x.grad is None


def test_shared_input_gradients_add(rng):
    x = leaf(rng.normal(size=3))
    T.sum(T.add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2, 2, 2])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_graph_order_is_topological(rng):
    x = leaf(rng.normal(size=3))
    a = T.sigmoid(x)
    b = T.mul(a, x)
    c = T.add(b, a)
    order = T.graph_order(T.sum(c))
    pos = {n.node_id: i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            assert pos[p.node_id] < pos[node.node_id]
    assert len(pos) == len(order)


# -- finite-difference check of every differentiable op -----------------------
# Elementwise |a - n| / max(|a|, |n|, 1e-4); h = 1e-5 in float64.

def _op_cases(rng):
    r = lambda *s: rng.normal(size=s)
    away = lambda *s: rng.uniform(0.2, 1.5, size=s) * rng.choice([-1, 1], size=s)
    mask = np.array([[True, True, False], [True, False, False]])
    return {
        "add": (lambda a, b: T.add(a, b), [r(2, 3), r(2, 3)]),
        "sub": (lambda a, b: T.sub(a, b), [r(2, 3), r(2, 3)]),
        "mul": (lambda a, b: T.mul(a, b), [r(2, 3), r(2, 3)]),
        "neg": (lambda a: T.neg(a), [r(4)]),
        "scale": (lambda a: T.scale(a, -0.7), [r(4)]),
        "add_constant": (lambda a: T.add_constant(a, np.ones(3)), [r(2, 3)]),
        "sigmoid": (lambda a: T.sigmoid(a), [r(2, 3)]),
        "relu": (lambda a: T.relu(a), [away(2, 3)]),
        "matmul": (lambda a, b: T.matmul(a, b), [r(2, 3, 4), r(4, 2)]),
        "matmul_batched": (lambda a, b: T.matmul(a, b), [r(2, 2, 3, 4), r(2, 2, 4, 3)]),
        "linear": (lambda x, w, b: T.linear(x, w, b), [r(2, 3, 4), r(4, 2), r(2)]),
        "softmax": (lambda a: T.softmax(a), [r(2, 3, 5)]),
        "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [r(3, 6), r(6), r(6)]),
        "avg_pool": (lambda a: T.avg_pool_lastdim(a, 3, 2), [r(2, 9)]),
        "sum_axis": (lambda a: T.sum(a, axis=1), [r(2, 3, 2)]),
        "mean_axis": (lambda a: T.mean(a, axis=0, keepdims=True), [r(3, 2)]),
        "masked_mean": (lambda a: T.masked_mean(a, mask, axis=1), [r(2, 3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [r(2, 1, 3), r(2, 2, 3)]),
        "reshape": (lambda a: T.reshape(a, (3, 4)), [r(2, 6)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
        "expand": (lambda a: T.expand(a, (2, 3, 4)), [r(3, 1)]),
        "getitem": (lambda a: a[:, 0:2, :], [r(2, 3, 2)]),
    }


@pytest.mark.parametrize("name", sorted(_op_cases(np.random.default_rng(0))))
def test_op_gradient_matches_finite_differences(name, backend):
    fn, arrays = _op_cases(np.random.default_rng(7))[name]
    inputs = [leaf(a) for a in arrays]
    w = random_weights(fn(*inputs).shape, seed=3)

    def loss():
        return T.sum(T.mul(fn(*inputs), w))

    errs = check_gradients(loss, {str(i): t for i, t in enumerate(inputs)}, h=1e-5, floor=1e-4)
    assert max(errs.values()) < 1e-6, errs
