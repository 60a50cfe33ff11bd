import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from meanflow_dance.autodiff import (AutodiffError, ParameterStore, Tape, Tensor,
                                     finite_diff_directional, grad, jvp, no_grad, ops,
                                     relative_error, stop_gradient)

F64 = np.float64


def t64(a):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=True)


def check_op(f, *arrays, h=1e-6, tol=1e-6, seed=99):
    """Reverse-mode and forward-mode against central differences in float64."""
    rng = np.random.default_rng(seed)
    xs = [t64(a) for a in arrays]
    vs = [rng.standard_normal(np.shape(a)) for a in arrays]
    fd = finite_diff_directional(f, xs, vs, h=h)
    _, tangent = jvp(f, xs, vs)
    assert relative_error(tangent, fd) < tol
    w = rng.standard_normal(fd.shape)
    with Tape() as tape:
        out = f(*xs)
    grads = tape.gradient(out, xs, seed=w)
    lhs = sum(float((g * v).sum()) for g, v in zip(grads, vs))
    assert abs(lhs - float((w * fd).sum())) < tol * max(1.0, abs(lhs))


UNARY = [ops.exp, ops.sin, ops.cos, ops.tanh, ops.sigmoid, ops.silu, ops.softplus, ops.square,
         ops.neg, lambda a: ops.sum(a, axis=1), lambda a: ops.mean(a, axis=0, keepdims=True),
         lambda a: ops.swapaxes(a, 0, 1), lambda a: ops.reshape(a, (-1,)),
         lambda a: ops.flip(a, axis=1), lambda a: a[1:, ::2], lambda a: a[[0, 2, 0]],
         lambda a: ops.normalize(a), lambda a: ops.broadcast_to(a[:1], (4, 5))]


@pytest.mark.parametrize("f", UNARY)
def test_unary_ops_match_finite_differences(f):
    x = np.random.default_rng(0).standard_normal((4, 5))
    check_op(f, x)


def test_positive_domain_ops():
    x = np.random.default_rng(1).uniform(0.5, 2.0, (3, 4))
    for f in (ops.log, ops.sqrt, ops.rsqrt):
        check_op(f, x)


@pytest.mark.parametrize("f", [ops.add, ops.sub, ops.mul, ops.div, ops.matmul])
def test_binary_ops_with_broadcasting(f):
    rng = np.random.default_rng(2)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 4)) if f is ops.matmul else rng.uniform(0.5, 1.5, (3, 4))
    check_op(f, a, b)


def test_composites_and_sequence_ops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 3))
    check_op(lambda a, b: ops.cross(a, b), x, rng.standard_normal((2, 6, 3)))
    check_op(lambda a, s: ops.rms_norm(a, s), x, rng.standard_normal(3))
    check_op(lambda a, w, b: ops.depthwise_conv1d(a, w, b), x, rng.standard_normal((3, 3)),
             rng.standard_normal(3))
    check_op(lambda a, b: ops.concat([a, b], axis=1), x, x[:, :2])
    check_op(lambda a, b: ops.stack([a, b], axis=0), x, x)
    check_op(lambda t: ops.sinusoidal(t, 6, 8.0), rng.uniform(0, 1, 5))
    check_op(lambda a, b: ops.mse(a, b), x, x + 0.1)


def test_scan_op_gradients_in_both_modes():
    rng = np.random.default_rng(4)
    b, T, c, n = 2, 7, 3, 2
    args = [rng.standard_normal((b, T, c)), rng.uniform(0.1, 1.0, (b, T, c)),
            -rng.uniform(0.2, 2.0, (c, n)), rng.standard_normal((b, T, n)),
            rng.standard_normal((b, T, n))]
    check_op(ops.ssm_scan, *args, tol=1e-6)


def test_scan_op_series_branch_near_zero_decay():
    rng = np.random.default_rng(5)
    args = [rng.standard_normal((1, 5, 2)), np.full((1, 5, 2), 1e-3),
            np.full((2, 2), -1e-3), rng.standard_normal((1, 5, 2)), rng.standard_normal((1, 5, 2))]
    check_op(ops.ssm_scan, *args, h=1e-7, tol=1e-5)


def test_stop_gradient_blocks_reverse_and_forward():
    x = t64([1.0, 2.0])
    with Tape() as tape:
        y = ops.sum(ops.mul(stop_gradient(x), x))
    (g,) = tape.gradient(y, [x])
    np.testing.assert_array_equal(g, [1.0, 2.0])
    _, d = jvp(lambda a: ops.mul(stop_gradient(a), a), [x], [np.ones(2)])
    np.testing.assert_array_equal(d, [1.0, 2.0])


def test_no_grad_records_nothing():
    x = t64([1.0])
    with Tape() as tape:
        with no_grad():
            ops.exp(x)
        ops.sin(x)
    assert len(tape) == 1


def test_only_the_innermost_tape_records():
    x = t64([0.5])
    with Tape() as outer:
        with Tape() as inner:
            y = ops.exp(x)
        s = ops.sum(y)
    assert len(inner) == 1 and len(outer) == 1
    # s was recorded on the outer tape only, so the inner one cannot reach x
    assert inner.gradient(s, [x])[0][0] == 0.0
    assert inner.gradient(y, [x], seed=np.ones(1))[0][0] == pytest.approx(np.exp(0.5))


def test_gradient_needs_scalar_or_seed():
    x = t64(np.ones(3))
    with Tape() as tape:
        y = ops.exp(x)
    with pytest.raises(AutodiffError):
        tape.gradient(y, [x])


def test_unused_source_gets_zeros():
    x, z = t64([1.0]), t64([2.0, 3.0])
    with Tape() as tape:
        y = ops.sum(ops.square(x))
    gx, gz = tape.gradient(y, [x, z])
    assert gx[0] == 2.0 and not gz.any()


def test_grad_helper_on_parameter_store():
    p = ParameterStore()
    p["w"] = np.array([1.0, -2.0], dtype=np.float32)
    loss, grads = grad(lambda q: ops.sum(ops.square(q["w"])), p)
    assert loss == 5.0
    np.testing.assert_allclose(grads["w"], [2.0, -4.0])


def test_float32_default_and_float64_passthrough():
    assert Tensor([1.0]).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(F64, (3, 4), elements=st.floats(-3, 3)),
       hnp.arrays(F64, (3, 4), elements=st.floats(-3, 3)))
def test_jvp_is_linear_in_the_tangent(x, v):
    f = lambda a: ops.tanh(ops.mul(a, a))  # noqa: E731
    _, d1 = jvp(f, [t64(x)], [v])
    _, d2 = jvp(f, [t64(x)], [2.5 * v])
    np.testing.assert_allclose(d2, 2.5 * d1, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(F64, (5,), elements=st.floats(-2, 2)))
def test_vjp_and_jvp_are_adjoint(x):
    f = lambda a: ops.mul(ops.sin(a), ops.exp(a))  # noqa: E731
    v = np.linspace(-1, 1, 5)
    w = np.arange(5.0)
    _, d = jvp(f, [t64(x)], [v])
    xt = t64(x)
    with Tape() as tape:
        out = f(xt)
    (g,) = tape.gradient(out, [xt], seed=w)
    assert float(w @ d) == pytest.approx(float(g @ v), rel=1e-12, abs=1e-12)
