import numpy as np
import pytest

from safeproj import autodiff as ad
from oracles import central_diff, rel_err


def grad_of(build, *arrays):
    params = [ad.parameter(a) for a in arrays]
    loss = build(*params)
    ad.backward(loss)
    return [p.grad for p in params]


def weighted(node, w):
    """Scalar probe sum(node * w) so the full VJP is exercised."""
    return ad.sum(ad.mul(node, ad.constant(w)))


# one entry per op: (name, builder(params..., w) -> node, input generator)
def _inputs(rng, *shapes, lo=-2.0, hi=2.0):
    return [rng.uniform(lo, hi, size=s) for s in shapes]


UNARY = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "square": ad.square,
    "neg": ad.neg,
    "clip": lambda x: ad.clip(x, -0.7, 1.1),
    "sum_axis0": lambda x: ad.sum(x, axis=0),
    "mean_axis1": lambda x: ad.mean(x, axis=1),
    "slice": lambda x: x[1:, ::2],
    "fancy_slice": lambda x: x[np.array([0, 2, 0])],
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "transpose": lambda x: x.T,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    op = UNARY[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-2, 2, size=(3, 4))
        w = rng.normal(size=op(ad.constant(x)).shape)
        (g,) = grad_of(lambda p: weighted(op(p), w), x)
        fd = central_diff(lambda v: float(np.sum(op(ad.constant(v)).value * w)), x, h=1e-6)
        worst = max(worst, rel_err(g, fd))
    assert worst <= 1e-4


def test_log_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.uniform(0.2, 2.0, size=5)
        w = rng.normal(size=5)
        (g,) = grad_of(lambda p: weighted(ad.log(p), w), x)
        fd = central_diff(lambda v: float(np.log(v) @ w), x)
        assert rel_err(g, fd) <= 1e-4


BINARY = {
    "add": (ad.add, (3, 2), (3, 2)),
    "sub": (ad.sub, (3, 2), (3, 2)),
    "mul": (ad.mul, (3, 2), (3, 2)),
    "mul_scalar": (ad.mul, (), (3, 2)),
    "div": (lambda a, b: ad.div(a, ad.add(ad.square(b), 0.5)), (3, 2), (3, 2)),
    "matmul_mm": (ad.matmul, (3, 4), (4, 2)),
    "matmul_mv": (ad.matmul, (3, 4), (4,)),
    "matmul_vm": (ad.matmul, (4,), (4, 2)),
    "matmul_vv": (ad.matmul, (4,), (4,)),
    "add_rowwise": (ad.add_rowwise, (5, 3), (3,)),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), (2, 3), (2, 1)),
    "stack": (lambda a, b: ad.stack([a, b], axis=1), (2, 3), (2, 3)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name):
    op, sa, sb = BINARY[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(100):
        a, b = _inputs(rng, sa, sb)
        w = rng.normal(size=op(ad.constant(a), ad.constant(b)).shape)
        ga, gb = grad_of(lambda p, q: weighted(op(p, q), w), a, b)
        f = lambda u, v: float(np.sum(op(ad.constant(u), ad.constant(v)).value * w))
        assert rel_err(ga, central_diff(lambda u: f(u, b), a)) <= 1e-4
        assert rel_err(gb, central_diff(lambda v: f(a, v), b)) <= 1e-4


def test_linear_and_grouped_linear_gradients():
    rng = np.random.default_rng(5)
    for _ in range(100):
        x, W, b = _inputs(rng, (4, 3), (3, 2), (2,))
        w = rng.normal(size=(4, 2))
        grads = grad_of(lambda *p: weighted(ad.linear(*p), w), x, W, b)
        for i, arr in enumerate((x, W, b)):
            def f(v, i=i):
                args = [x, W, b]
                args[i] = v
                return float(np.sum((args[0] @ args[1] + args[2]) * w))
            assert rel_err(grads[i], central_diff(f, arr)) <= 1e-4

        x, W, b = _inputs(rng, (3, 2, 4), (3, 4, 5), (3, 5))
        w = rng.normal(size=(3, 2, 5))
        grads = grad_of(lambda *p: weighted(ad.grouped_linear(*p), w), x, W, b)
        for i, arr in enumerate((x, W, b)):
            def f(v, i=i):
                args = [x, W, b]
                args[i] = v
                return float(np.sum((np.matmul(args[0], args[1]) + args[2][:, None, :]) * w))
            assert rel_err(grads[i], central_diff(f, arr)) <= 1e-4


def test_matmul_identity():
    out = ad.matmul(ad.constant([[1.0, 2.0], [3.0, 4.0]]), ad.constant(np.eye(2)))
    np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])


def test_relu_subgradient_at_zero_is_zero():
    x = ad.parameter([-1.0, 0.0, 2.0])
    y = ad.relu(x)
    np.testing.assert_array_equal(y.value, [0, 0, 2])
    ad.backward(ad.sum(y))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sum_of_squares_gradient():
    x = ad.parameter([1.0, 2.0, 3.0])
    ad.backward(ad.sum(ad.square(x)))
    fd = central_diff(lambda v: float(np.sum(v ** 2)), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(x.grad, [2, 4, 6], atol=1e-8)
    np.testing.assert_allclose(fd, [2, 4, 6], atol=1e-6)


def test_constant_loss_leaves_zero_grads():
    x = ad.parameter([1.0, 2.0])
    loss = ad.constant(3.0)
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_product_rule():
    x, y = ad.parameter(3.0), ad.parameter(4.0)
    ad.backward(x * y)
    assert x.grad == 4.0 and y.grad == 3.0


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(6, 4))
    Y = rng.normal(size=(6, 2))
    W1, b1, W2, b2 = rng.normal(size=(4, 5)), rng.normal(size=5), rng.normal(size=(5, 2)), rng.normal(size=2)

    def loss_fn(W1, b1, W2, b2):
        hdn = ad.tanh(ad.linear(ad.constant(X), W1, b1))
        return ad.mean(ad.square(ad.linear(hdn, W2, b2) - ad.constant(Y)))

    grads = grad_of(loss_fn, W1, b1, W2, b2)
    arrays = [W1, b1, W2, b2]
    for i, arr in enumerate(arrays):
        def f(v, i=i):
            args = [ad.constant(a) for a in arrays]
            args[i] = ad.constant(v)
            return float(loss_fn(*args).value)
        assert rel_err(grads[i], central_diff(f, arr)) <= 1e-5


def test_non_scalar_loss_rejected():
    with pytest.raises(ad.ContractError):
        ad.backward(ad.parameter([1.0, 2.0]))


def test_shape_error_reports_both_shapes():
    with pytest.raises(ad.ShapeError) as info:
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    assert "(2, 3)" in str(info.value)
    with pytest.raises(ad.ShapeError):
        ad.add(ad.constant(np.ones(3)), ad.constant(np.ones(4)))


def test_accumulation_is_additive():
    rng = np.random.default_rng(2)
    xv = rng.normal(size=4)
    f1 = lambda x: ad.sum(ad.tanh(x))
    f2 = lambda x: ad.sum(ad.square(x) * 3.0)
    x = ad.parameter(xv)
    ad.backward(f1(x))
    ad.backward(f2(x))
    together = ad.parameter(xv)
    ad.backward(f1(together) + f2(together))
    np.testing.assert_allclose(x.grad, together.grad, rtol=1e-12)


def test_shared_subexpression_counted_once_per_use():
    xv = np.array([0.3, -1.2, 0.8])
    x = ad.parameter(xv)
    s = ad.tanh(x)
    ad.backward(ad.sum(s * s + s))
    # unrolled tree: separate tanh nodes for every use
    y = ad.parameter(xv)
    ad.backward(ad.sum(ad.tanh(y) * ad.tanh(y) + ad.tanh(y)))
    np.testing.assert_allclose(x.grad, y.grad, rtol=1e-12)
    t = np.tanh(xv)
    np.testing.assert_allclose(x.grad, (2 * t + 1) * (1 - t ** 2), rtol=1e-12)


def test_custom_node_participates_in_backward():
    x = ad.parameter([1.0, 2.0])
    y = ad.custom_node(x.value * 2.0, [x], lambda g: (2.0 * g,))
    ad.backward(ad.sum(ad.square(y)))
    np.testing.assert_allclose(x.grad, 8.0 * x.value)


def test_custom_node_gradient_count_mismatch():
    x, z = ad.parameter([1.0]), ad.parameter([2.0])
    y = ad.custom_node(x.value + z.value, [x, z], lambda g: (g,))
    with pytest.raises(ad.ContractError):
        ad.backward(ad.sum(y))


def test_no_grad_builds_detached_values():
    x = ad.parameter([1.0])
    with ad.no_grad():
        y = ad.tanh(x) * 2.0
    assert not y.requires_grad and y.parents == ()


def test_deep_chain_does_not_recurse():
    x = ad.parameter(0.5)
    y = x
    for _ in range(5000):
        y = y * 1.0
    ad.backward(y)
    assert x.grad == pytest.approx(1.0)
