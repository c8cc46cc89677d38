import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvmsr import autodiff as ad
from dvmsr.autodiff import Tensor, backward, debug_mode, no_grad

from conftest import gradcheck, tparam


def test_sum_gradient_is_ones(rng):
    x = tparam(rng, 3, 4)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_square_sum_gradient_is_2x(rng):
    x = tparam(rng, 5)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_gradients_accumulate_over_reuse(rng):
    x = tparam(rng, 4)
    y = x + x + x * 2.0
    backward(y.sum())
    np.testing.assert_allclose(x.grad, np.full(4, 4.0))


def test_backward_twice_accumulates_into_leaf(rng):
    x = tparam(rng, 3)
    backward(x.sum())
    backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, np.full(3, 4.0))


def test_non_scalar_backward_rejected(rng):
    x = tparam(rng, 2, 2)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_graph_released_after_backward(rng):
    x = tparam(rng, 3)
    y = ad.exp(x) * 2.0
    loss = y.sum()
    backward(loss)
    assert loss._backward is None and y._parents == ()


def test_no_grad_records_nothing(rng):
    x = tparam(rng, 3)
    with no_grad():
        y = ad.silu(x) + 1.0
    assert not y.requires_grad and y._parents == ()


def test_debug_mode_flags_non_finite():
    x = Tensor(np.array([1000.0]), requires_grad=True)
    with debug_mode(), np.errstate(over="ignore"):
        with pytest.raises(FloatingPointError):
            ad.exp(x)
    with np.errstate(over="ignore"):
        assert np.isinf(ad.exp(x).data).all()


def test_graph_order_visits_each_node_once(rng):
    x = tparam(rng, 2)
    a = x * 2.0
    b = a + a
    c = b * a
    order = ad.graph_order(c.sum())
    ids = [id(n) for n in order]
    assert len(ids) == len(set(ids))
    assert ids.index(id(x)) < ids.index(id(a)) < ids.index(id(b)) < ids.index(id(c))


def test_unbroadcast_sums_expanded_axes():
    g = np.ones((2, 3, 4))
    assert ad.unbroadcast(g, (3, 1)).shape == (3, 1)
    np.testing.assert_array_equal(ad.unbroadcast(g, (3, 1)), np.full((3, 1), 8.0))
    np.testing.assert_array_equal(ad.unbroadcast(g, ()), 24.0)


def test_sigmoid_is_stable_at_extremes():
    s = ad.sigmoid_np(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_silu_values():
    assert ad.silu(Tensor(np.array(0.0))).item() == 0.0
    assert abs(ad.silu(Tensor(np.array(40.0))).item() - 40.0) < 1e-12


def test_softplus_at_zero_is_log2():
    assert ad.softplus(Tensor(np.zeros(1))).item() == pytest.approx(np.log(2.0), abs=1e-15)


UNARY = {
    "exp": ad.exp,
    "neg": ad.neg,
    "reciprocal": lambda a: ad.reciprocal(a + 3.0),
    "square": ad.square,
    "abs": ad.tabs,
    "silu": ad.silu,
    "softplus": ad.softplus,
    "leaky_relu": ad.leaky_relu,
    "reshape": lambda a: ad.reshape(a, (6, 2)),
    "transpose": lambda a: ad.transpose(a, (1, 0, 2)),
    "flip": lambda a: ad.flip(a, 1),
    "getitem": lambda a: ad.getitem(a, (slice(None), [0, 2, 0])),
    "sum_axis": lambda a: ad.tsum(a, axis=1, keepdims=True),
    "mean": lambda a: ad.tmean(a, axis=(0, 2)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = tparam(rng, 2, 3, 2)
    if name in ("abs", "leaky_relu"):
        # keep finite differences away from the kink
        x.data = np.where(np.abs(x.data) < 0.05, 0.3, x.data)
    assert gradcheck(lambda: UNARY[name](x), [x]) < 1e-4


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(op, rng):
    a = tparam(rng, 2, 3, 4)
    b = tparam(rng, 3, 1)
    if op == "div":
        b.data = np.abs(b.data) + 0.5
    f = {
        "add": lambda: a + b,
        "sub": lambda: a - b,
        "mul": lambda: a * b,
        "div": lambda: a / b,
    }[op]
    assert gradcheck(f, [a, b]) < 1e-4


def test_concat_gradient(rng):
    a, b = tparam(rng, 2, 3), tparam(rng, 2, 1)
    assert gradcheck(lambda: ad.concat([a, b], axis=1), [a, b]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_elementwise_chain_gradient_property(m, n, seed):
    rng = np.random.default_rng(seed)
    x = tparam(rng, m, n)
    y = tparam(rng, n)
    f = lambda: ad.softplus(x * y) + ad.silu(x - y) * ad.exp(y * 0.3)
    assert gradcheck(f, [x, y]) < 1e-4


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(4, 5))
    run = lambda: (ad.silu(Tensor(x)) * ad.softplus(Tensor(x))).data
    assert run().tobytes() == run().tobytes()
