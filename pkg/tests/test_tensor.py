import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advtrain import tensor as T
from advtrain.tensor import DetachedError, NonFiniteError, ShapeError, Tensor


def naive_conv2d(x, w, b=None, stride=1, pad=0):
    """Quadruple loop cross-correlation on NCHW input, accumulated in kernel order."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo), dtype=x.dtype)
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[i, ch, r * stride + p, s * stride + q] * w[o, ch, p, q]
                    out[i, o, r, s] = acc + (b[o] if b is not None else 0.0)
    return out


def naive_max_pool(x, size):
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(n):
        for ch in range(c):
            for r in range(ho):
                for s in range(wo):
                    out[i, ch, r, s] = x[i, ch, r * size : (r + 1) * size, s * size : (s + 1) * size].max()
    return out


# ---------------------------------------------------------------------------
# forward examples


def test_relu_definition():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_exp_of_zero():
    assert T.exp(Tensor([0.0])).data.tolist() == [1.0]


def test_conv_all_ones():
    x = np.ones((1, 1, 3, 3))
    w = np.ones((1, 1, 2, 2))
    out = T.conv2d(x, w).data
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out == 4.0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_matches_loop_oracle_exactly_on_integers(stride, pad):
    # integer-valued f64 data: every partial sum is exact, so summation order cannot matter
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.integers(-4, 5, (2, 3, 8, 7)).astype(np.float64)
    w = rng.integers(-3, 4, (4, 3, 3, 3)).astype(np.float64)
    b = rng.integers(-2, 3, 4).astype(np.float64)
    with T.precision("f64"):
        got = T.conv2d(x, w, b, stride=stride, padding=pad).data
    assert np.array_equal(got, naive_conv2d(x, w, b, stride, pad))


def test_conv_matches_loop_oracle_on_reals():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2, 8, 8))
    w = rng.normal(size=(3, 2, 3, 3))
    got = T.conv2d(x, w, None, 1, 1).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, None, 1, 1), rtol=0, atol=1e-12)


def test_conv_nhwc_layout_agrees():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    a = T.conv2d(x, w, padding=1).data
    b = T.conv2d(x.transpose(0, 2, 3, 1), w, padding=1, layout="NHWC").data.transpose(0, 3, 1, 2)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_max_pool_matches_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 7, 6))
    np.testing.assert_array_equal(T.max_pool2d(x, 2).data, naive_max_pool(x, 2))


def test_max_pool_gradient_goes_to_first_tied_position():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_(T.max_pool2d(x, 2))
    g = T.backward(tape, loss)[x]
    assert g.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 2, 2)))
    with pytest.raises(ShapeError, match="add"):
        T.add(np.ones(3), np.ones(4))


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))


def test_forward_dispatch_by_kind():
    out = T.forward("matmul", np.eye(2), np.array([[1.0], [2.0]]))
    assert out.data.ravel().tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        T.forward("nope", 1.0)


def test_flatten_keeps_batch_axis():
    assert T.flatten(np.zeros((3, 2, 4, 5))).shape == (3, 40)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    p = T.softmax(rng.normal(scale=5, size=(6, 10)).astype(np.float32)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# backward examples


def test_identity_gradient():
    x = Tensor(3.0, requires_grad=True)
    with T.Tape() as tape:
        y = x * 1.0
    assert T.backward(tape, y)[x] == pytest.approx(1.0)


def test_chain_rule_exp():
    x = Tensor(0.0, requires_grad=True, dtype=np.float64)
    with T.Tape() as tape:
        y = T.exp(x * 2.0)
    assert T.backward(tape, y)[x] == pytest.approx(2.0)


def test_backward_on_detached_tensor():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape1:
        a = T.sum_(x * x)
    with T.Tape() as tape2:
        T.sum_(x)
    with pytest.raises(DetachedError):
        T.backward(tape2, a)
    with pytest.raises(DetachedError):
        T.backward(T.Tape(), a)
    assert T.backward(tape1, a)[x].tolist() == [2.0, 4.0]


def test_backward_needs_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        T.backward(tape, y)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.sum_(T.relu(x))
    assert T.backward(tape, y)[x].tolist() == [0.0, 1.0, 0.0]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        with T.no_grad():
            T.exp(x)
    assert tape.nodes == []


def test_tape_is_topological_and_each_node_visited_once(monkeypatch):
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    with T.Tape() as tape:
        h = T.relu(T.matmul(x, w))
        loss = T.sum_(h * h + h)
    pos = {id(n.output): n.index for n in tape.nodes}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp._node is not None:
                assert pos[id(inp)] < node.index
    calls = []
    for op, rule in list(T.GRAD_RULES.items()):
        monkeypatch.setitem(T.GRAD_RULES, op, lambda n, g, needs, rule=rule: (calls.append(n.index), rule(n, g, needs))[1])
    T.backward(tape, loss)
    assert sorted(calls) == list(range(len(tape.nodes)))


def test_intermediate_gradients_kept_on_tape():
    x = Tensor([2.0], requires_grad=True)
    with T.Tape() as tape:
        h = x * 3.0
        y = T.sum_(h * h)
    T.backward(tape, y)
    assert tape.grads[h].tolist() == [12.0]


# ---------------------------------------------------------------------------
# finite-difference oracle


def test_finite_diff_square():
    g = T.finite_diff_grad(lambda v: float(v[0] ** 2), np.array([1.0]), h=1e-5)
    assert abs(g[0] - 2.0) < 1e-8


def test_finite_diff_relu_sum():
    g = T.finite_diff_grad(lambda v: float(np.maximum(v, 0).sum()), np.array([-1.0, 2.0]))
    np.testing.assert_allclose(g, [0.0, 1.0], atol=1e-9)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        T.finite_diff_grad(lambda v: 0.0, np.zeros(1), h=0.0)


def _op_check(build, *arrays, tol=1e-6):
    with T.precision("f64"):
        ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        with T.Tape() as tape:
            loss = build(*ts)
        grads = T.backward(tape, loss)
        for i, t in enumerate(ts):
            def f(v, i=i):
                args = [Tensor(v if j == i else a, dtype=np.float64) for j, a in enumerate(arrays)]
                return float(build(*args).data)
            num = T.finite_diff_grad(f, arrays[i])
            np.testing.assert_allclose(grads[t], num, rtol=tol, atol=tol)


def test_op_gradients_against_finite_differences():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    _op_check(lambda x, y: T.sum_(T.matmul(x, y) * T.matmul(x, y)), a, b)
    _op_check(lambda x, y: T.mean(x * y + x - y), a, rng.normal(size=(3, 4)))
    _op_check(lambda x: T.sum_(T.exp(T.minimum(x, 0.3))), a)
    _op_check(lambda x, y: T.sum_(x + y), a, rng.normal(size=(1, 4)))
    _op_check(lambda x: T.sum_(T.transpose(T.reshape(x, (2, 6)), (1, 0)) * np.arange(12.0).reshape(6, 2)), a)
    _op_check(lambda x: T.sum_(T.mean(x, axis=1) * np.array([1.0, -2.0, 3.0])), a)
    _op_check(lambda z: T.softmax_cross_entropy(z, np.eye(4)[[0, 2, 3]]), a)
    weights = rng.normal(size=(3, 4))
    _op_check(lambda z: T.sum_(T.log_softmax(z) * weights), a)
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    _op_check(lambda x, w, b: T.sum_(T.max_pool2d(T.conv2d(x, w, b, stride=1, padding=1), 2)), x, w, bias)
    _op_check(lambda x, w: T.sum_(T.relu(T.conv2d(x, w, stride=2, padding=1)) * 0.5), x, w)


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.5, 2.0, -4.0, 0.25]), st.sampled_from([1.0, -0.5, 8.0]))
def test_backward_is_linear(seed, a, b):
    # power-of-two coefficients scale exactly, so equality is exact
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    w = rng.normal(size=(4, 2))

    def f(t):
        return T.sum_(T.relu(T.matmul(t, w)))

    def g(t):
        return T.mean(T.exp(T.minimum(t, 1.0)))

    with T.Tape() as tape:
        fx, gx = f(x), g(x)
        combo = fx * a + gx * b
    both = T.backward(tape, combo)[x]
    with T.Tape() as tf:
        fx2 = f(x)
    with T.Tape() as tg:
        gx2 = g(x)
    gf, gg = T.backward(tf, fx2)[x], T.backward(tg, gx2)[x]
    assert np.array_equal(both, a * gf + b * gg)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 8), st.integers(1, 3), st.integers(0, 2),
       st.integers(1, 2), st.integers(0, 2**31))
def test_conv_shapes_and_oracle_property(n, c, hw, k, pad, stride, seed):
    if hw + 2 * pad < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.integers(-3, 4, (n, c, hw, hw)).astype(np.float64)
    w = rng.integers(-2, 3, (2, c, k, k)).astype(np.float64)
    with T.precision("f64"):
        got = T.conv2d(x, w, stride=stride, padding=pad).data
    assert np.array_equal(got, naive_conv2d(x, w, None, stride, pad))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_log_softmax_normalised(row):
    z = np.array([row], dtype=np.float64)
    out = T.log_softmax(z).data
    assert math.isclose(np.exp(out).sum(), 1.0, abs_tol=1e-12)
