import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mplab import layers as L
from mplab.tensor import (
    NonFiniteError,
    SgdState,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    mean,
    mul,
    precision,
    scale,
    set_debug,
    sgd_step,
    sub,
    sum_,
)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
    backward(y, tape)
    assert x.grad == pytest.approx(6.0)


def test_sigmoid_gradient_at_zero():
    x = Tensor(np.zeros(1), requires_grad=True)
    with Tape() as tape:
        y = sum_(L.sigmoid(x))
    backward(y, tape)
    assert x.grad[0] == pytest.approx(0.25)


def test_three_layer_composite_matches_finite_differences():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        x = rng.standard_normal((4, 3))
        ws = [Tensor(rng.standard_normal(s), requires_grad=True) for s in ((3, 5), (5, 4), (4, 2))]

        def f():
            h = L.sigmoid(L.linear(Tensor(x), ws[0].detach()))
            h = L.relu(L.linear(h, ws[1].detach()))
            return float(mean(L.linear(h, ws[2].detach())).data)

        with Tape() as tape:
            h = L.sigmoid(L.linear(Tensor(x), ws[0]))
            h = L.relu(L.linear(h, ws[1]))
            loss = mean(L.linear(h, ws[2]))
        backward(loss, tape)
        for w in ws:
            flat = w.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + 1e-5
                fp = f()
                flat[i] = orig - 1e-5
                fm = f()
                flat[i] = orig
                num = (fp - fm) / 2e-5
                ana = w.grad.reshape(-1)[i]
                assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-6)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        backward(y, tape)


def test_backward_rejects_loss_from_another_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape():
        y = sum_(x)
    with pytest.raises(ValueError, match="not produced on this tape"):
        backward(y, Tape())


def test_tape_cleared_after_backward_and_grads_accumulate():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            y = sum_(mul(x, x))
        backward(y, tape)
        assert tape.records == []
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_leaf_used_twice_gets_summed_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        y = sum_(add(mul(x, x), scale(x, 3.0)))
    backward(y, tape)
    assert x.grad[0] == pytest.approx(7.0)


def test_leaf_frozen_while_recording_gets_no_gradient():
    w = Tensor(np.array([2.0]), requires_grad=True)
    x = Tensor(np.array([3.0]), requires_grad=True)
    w.requires_grad = False
    with Tape() as tape:
        y = sum_(mul(w, x))
    w.requires_grad = True  # unfrozen again before backward
    backward(y, tape)
    assert w.grad is None and x.grad[0] == 2.0


def test_no_recording_without_requires_grad():
    with Tape() as tape:
        add(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert tape.records == []


@pytest.mark.parametrize("mu, expected", [(0.0, 0.8), (0.9, 0.8)])
def test_sgd_first_step(mu, expected):
    p = Tensor(np.array([1.0]), dtype=np.float64)
    sgd_step(p, np.array([2.0]), 0.1, SgdState(mu))
    assert p.data[0] == pytest.approx(expected, abs=1e-15)


def test_sgd_momentum_second_step():
    p = Tensor(np.array([1.0]), dtype=np.float64)
    st_ = SgdState(0.9)
    sgd_step(p, np.array([2.0]), 0.1, st_)
    sgd_step(p, np.array([2.0]), 0.1, st_)
    assert st_.velocity[0] == pytest.approx(3.8, abs=1e-15)
    assert p.data[0] == pytest.approx(0.42, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-4, 1.0))
def test_sgd_without_momentum_is_closed_form(values, lr):
    p = Tensor(values.copy(), dtype=np.float64)
    g = np.linspace(-1, 1, values.size)
    sgd_step(p, g, lr, SgdState(0.0))
    np.testing.assert_array_equal(p.data, values - lr * g)


def test_sgd_errors():
    p = Tensor(np.ones(2))
    with pytest.raises(ValueError, match="shape"):
        sgd_step(p, np.ones(3), 0.1)
    with pytest.raises(ValueError, match="positive"):
        sgd_step(p, np.ones(2), 0.0)
    with pytest.raises(ValueError):
        SgdState(1.0)


def test_reductions_and_concat():
    assert float(mean(Tensor(np.array([0.0, 1.0, 2.0, 3.0]))).data) == 1.5
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
    np.testing.assert_array_equal(add(x, 0.0).data, x.data)
    out = concat([Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 5, 4, 4)))], axis=1)
    assert out.shape == (2, 8, 4, 4)


def test_incompatible_shapes_rejected():
    with pytest.raises(ValueError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        mul(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ValueError):
        concat([Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 5, 3, 4)))], axis=1)


def test_scalar_broadcast():
    x = Tensor(np.arange(3.0), requires_grad=True)
    c = Tensor(np.array(2.0), requires_grad=True)
    with Tape() as tape:
        y = sum_(sub(mul(x, c), c))
    backward(y, tape)
    np.testing.assert_allclose(x.grad, [2.0, 2.0, 2.0])
    assert float(c.grad) == pytest.approx(0 + 1 + 2 - 3)


def test_debug_mode_catches_non_finite():
    set_debug(True)
    try:
        x = Tensor(np.array([1.0, 0.0]), requires_grad=True)
        with Tape(), pytest.raises(NonFiniteError):
            mul(x, Tensor(np.array([np.inf, 1.0])))
    finally:
        set_debug(False)


def test_validate_reports_nan():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan])).validate()


def test_precision_switch():
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_reduction_is_bit_reproducible():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((8, 16, 8, 8)).astype(np.float32)
    a = float(mean(Tensor(x)).data)
    b = float(mean(Tensor(x.copy())).data)
    assert a == b
