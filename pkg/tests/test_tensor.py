import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rankdistill import tensor as T
from rankdistill.tensor import Tensor, grad_check


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def scalar_softmax(row):
    m = max(row)
    exps = [math.exp(x - m) for x in row]
    total = math.fsum(exps)
    return [e / total for e in exps]


# -- matmul ---------------------------------------------------------------
def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((3, 3))
    out = T.matmul(Tensor(a), Tensor(np.eye(3)))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_zero():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.zeros((2, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    out = T.matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(out - triple_loop_matmul(a, b))) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError, match="inner dimensions"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax / log_softmax -----------------------------------------------
def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_no_overflow():
    y = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(1.0) and y[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_scalar_reference():
    row = np.random.default_rng(2).standard_normal(6) * 3
    np.testing.assert_allclose(T.softmax(Tensor(row)).data, scalar_softmax(list(row)),
                               rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(Tensor(x)).data
    assert np.all(y >= 0)
    assert np.max(np.abs(y.sum(axis=-1) - 1.0)) < 1e-12
    ls = T.log_softmax(Tensor(x)).data
    assert np.max(np.abs(ls - np.log(y))) < 1e-10


# -- layer norm -----------------------------------------------------------
def test_layer_norm_constant_row():
    out = T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_unit_variance_pair():
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_array_equal(out.data, [1.0, -1.0])


def test_layer_norm_moments_against_scalar_oracle():
    row = list(np.random.default_rng(3).standard_normal(9) * 5 + 2)
    out = T.layer_norm(Tensor(row), Tensor(np.ones(9)), Tensor(np.zeros(9))).data
    mean = math.fsum(out) / len(out)
    var = math.fsum((v - mean) ** 2 for v in out) / len(out)
    assert abs(mean) < 1e-10
    assert abs(var - 1.0) < 1e-6


def test_layer_norm_rejects_width_one():
    with pytest.raises(T.ShapeError):
        T.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


# -- backward -------------------------------------------------------------
def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_mse_at_minimum():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    T.mse(x, x.detach()).backward()
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError, match="scalar"):
        T.backward(T.scale(x, 2.0))


def test_no_grad_leaf_never_accumulates():
    w = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    (w * c).sum().backward()
    assert c.grad is None
    np.testing.assert_array_equal(w.grad, [3.0, 4.0])


def test_repeated_cycles_after_reset():
    w = Tensor([0.5, -1.5], requires_grad=True)
    grads = []
    for _ in range(2):
        w.zero_grad()
        (w * w).sum().backward()
        grads.append(w.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_shared_subexpression_visited_once():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_array_equal(x.grad, [8.0])


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = w * 3.0
    assert not y.requires_grad


def test_composite_matches_finite_differences():
    rng = np.random.default_rng(4)
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((4, 5)))

    def f(a, b):
        return T.scale(T.log_softmax(T.matmul(a, b))[..., 1].sum(), -1.0) + T.softmax(a @ b).mean()

    assert grad_check(f, [a, b], h=1e-5) < 1e-4


# -- every primitive vs finite differences ------------------------------
def _primitives(rng):
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 5))
    g, bvec = rng.standard_normal(4), rng.standard_normal(4)
    y = rng.standard_normal((2, 3, 4))
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    table = rng.standard_normal((5, 4))
    weights = rng.standard_normal((2, 3, 4))
    return {
        "matmul": ([x, w], lambda a, b: (T.matmul(a, b) * weights[..., :1]).sum()),
        "add": ([x, y], lambda a, b: ((a + b) * weights).sum()),
        "sub": ([x, y], lambda a, b: ((a - b) * weights).sum()),
        "mul": ([x, y], lambda a, b: ((a * b) * weights).sum()),
        "scale": ([x], lambda a: (T.scale(a, -2.5) * weights).sum()),
        "transpose": ([x], lambda a: (a.transpose(2, 0, 1) * np.transpose(weights, (2, 0, 1))).sum()),
        "reshape": ([x], lambda a: (a.reshape(6, 4) * weights.reshape(6, 4)).sum()),
        "gather": ([table], lambda t: (T.gather(t, ids) * weights).sum()),
        "softmax": ([x], lambda a: (T.softmax(a) * weights).sum()),
        "log_softmax": ([x], lambda a: (T.log_softmax(a) * weights).sum()),
        "gelu": ([x], lambda a: (T.gelu(a) * weights).sum()),
        "tanh": ([x], lambda a: (T.tanh(a) * weights).sum()),
        "layer_norm": ([x, g, bvec], lambda a, gg, bb: (T.layer_norm(a, gg, bb) * weights).sum()),
        "sum": ([x], lambda a: (a.sum(axis=1) * weights[:, 0, :]).sum()),
        "mean": ([x], lambda a: (a.mean(axis=-1) * weights[..., 0]).sum()),
        "mse": ([x, y], lambda a, b: T.mse(a, b)),
        "getitem": ([x], lambda a: (a[:, 0, :] * weights[:, 0, :]).sum()),
        "concat": ([x, y], lambda a, b: (T.concat([a, b], axis=1)
                                         * np.concatenate([weights, weights], axis=1)).sum()),
    }


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", list(_primitives(np.random.default_rng(0))))
def test_primitive_gradients(name, seed):
    inputs, f = _primitives(np.random.default_rng(seed))[name]
    err = grad_check(f, [Tensor(a.copy()) for a in inputs], h=1e-5)
    assert err < 1e-4, f"{name}: max relative error {err}"


def test_relu_gradient_away_from_kink():
    x = Tensor(np.array([-1.0, 0.3, 2.0, -0.4]))
    assert grad_check(lambda a: (T.relu(a) * Tensor([1.0, 2.0, 3.0, 4.0])).sum(), [x]) < 1e-6


def test_relu_subgradient_zero_at_kink():
    x = Tensor([0.0], requires_grad=True)
    T.relu(x).sum().backward()
    assert x.grad[0] == 0.0


# -- grad_check itself ----------------------------------------------------
def test_grad_check_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0])
    err = grad_check(lambda a: (a * a).sum(), [x])
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    assert err < 1e-8


def test_grad_check_constant():
    x = Tensor([1.0, 2.0])
    assert grad_check(lambda a: T.scale(a, 0.0).sum() + 5.0, [x]) == 0.0


def test_grad_check_hinge_off_kink():
    x = Tensor([0.3, 0.1])
    err = grad_check(lambda a: T.relu(1.0 - a[0] + a[1]), [x])
    assert err < 1e-6


def test_grad_check_reports_non_finite_coordinate():
    x = Tensor([1.0, 1e-7])
    with pytest.raises(T.GradCheckError) as info:
        grad_check(lambda a: T.log(a).sum(), [x], h=1e-5)
    assert info.value.coordinate == (1,)


def test_forward_bitwise_deterministic():
    rng = np.random.default_rng(5)
    a, b = Tensor(rng.standard_normal((4, 6))), Tensor(rng.standard_normal((6, 3)))
    one = T.softmax(T.gelu(a @ b)).data
    two = T.softmax(T.gelu(a @ b)).data
    assert one.tobytes() == two.tobytes()
