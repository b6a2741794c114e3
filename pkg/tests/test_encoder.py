import numpy as np
import pytest

from sparsefeat.encoder import SiEncoder, TanhEncoder, encoder_fit_step, f_si, f_si_conv, f_tanh, prediction_error
from sparsefeat.nonlin import ShrinkParams, soft_shrink
from sparsefeat.tensor import ConnectionTable, KernelBank, correlate_valid

from oracles import central_diff, rel_err


def test_tanh_zero_gain_and_zero_input(rng):
    enc = TanhEncoder(rng.standard_normal((4, 6)), gain=np.zeros(4))
    assert not np.any(f_tanh(enc, rng.standard_normal(6)))
    enc = TanhEncoder(rng.standard_normal((4, 6)))
    assert not np.any(f_tanh(enc, np.zeros(6)))


def test_si_reductions(rng):
    W = rng.standard_normal((5, 7))
    enc = SiEncoder(W, shrink=ShrinkParams(np.full(5, 0.2), 3.0))
    x = rng.standard_normal(7)
    np.testing.assert_allclose(f_si(enc, x), soft_shrink(W @ x, 0.2, 3.0))
    assert not np.any(f_si(enc, np.zeros(7)))


def test_si_hand_evaluated():
    W = np.array([[1.0, 0.5], [-0.3, 2.0]])
    S = np.array([[0.0, 0.4], [-0.7, 0.0]])
    b, beta = np.array([0.1, 0.3]), 4.0
    x = np.array([0.8, -0.2])

    def sh(v, bb):
        return np.sign(v) * (np.log(np.exp(beta * bb) + np.exp(beta * abs(v)) - 1) / beta - bb)

    a = W @ x
    s1 = np.array([sh(a[0], b[0]), sh(a[1], b[1])])
    pre = a - S @ s1
    expected = np.array([sh(pre[0], b[0]), sh(pre[1], b[1])])
    enc = SiEncoder(W, S, ShrinkParams(b, beta))
    np.testing.assert_allclose(f_si(enc, x), expected, atol=1e-12)


def test_si_conv_is_shrunk_correlation(rng):
    bank = KernelBank.from_table(ConnectionTable.full(1, 3), 3, rng)
    enc = SiEncoder(bank)
    x = rng.standard_normal((1, 8, 8))
    np.testing.assert_allclose(f_si_conv(enc, x), soft_shrink(correlate_valid(x, bank), 0.1, 5.0))
    assert f_si_conv(SiEncoder(KernelBank.from_table(ConnectionTable.full(1, 64), 9, rng)), np.zeros((1, 143, 143))).shape == (64, 135, 135)


def test_conv_1x1_matches_dense(rng):
    n, c, k = 4, 2, 3
    W = rng.standard_normal((n, c * k * k))
    S = rng.standard_normal((n, n)) * 0.3
    shrink = ShrinkParams(rng.uniform(0.05, 0.3, n), 2.5)
    dense = SiEncoder(W, S, shrink)
    conv = dense.to_conv(c, k)
    x = rng.standard_normal((c, k, k))
    np.testing.assert_allclose(conv(x).ravel(), dense(x.ravel()), atol=1e-13)


def _check_grads(enc, x, gz):
    z, cache = enc.forward(x)
    gx, grads = enc.backward(cache, gz)

    def f():
        return float(np.sum(enc.forward(x)[0] * gz))

    assert rel_err(central_diff(f, x), gx) < 1e-5
    for name, p in enc.parameters().items():
        if name == "beta":
            b0 = enc.shrink.beta
            h = 1e-6
            enc.shrink.beta = b0 + h
            fp = f()
            enc.shrink.beta = b0 - h
            fm = f()
            enc.shrink.beta = b0
            assert rel_err(grads["beta"], (fp - fm) / (2 * h)) < 1e-5
        else:
            num = central_diff(f, p)
            if name == "W" and enc.conv:
                num *= enc.bank.mask[:, :, None, None]
            if name == "S":
                np.fill_diagonal(num, 0.0)
            assert rel_err(num, grads[name]) < 1e-5, name


def test_dense_gradients(rng):
    S = rng.standard_normal((4, 4)) * 0.5
    np.fill_diagonal(S, 0)
    _check_grads(SiEncoder(rng.standard_normal((4, 6)), S, ShrinkParams(rng.uniform(0.1, 0.5, 4), 3.0)), rng.standard_normal((3, 6)), rng.standard_normal((3, 4)))
    _check_grads(TanhEncoder(rng.standard_normal((4, 6)), rng.uniform(0.5, 2, 4), rng.standard_normal(4)), rng.standard_normal((3, 6)), rng.standard_normal((3, 4)))


def test_conv_gradients(rng):
    bank = KernelBank.from_table(ConnectionTable.random(3, 4, 2, rng), 3, rng)
    S = rng.standard_normal((4, 4)) * 0.5
    np.fill_diagonal(S, 0)
    _check_grads(SiEncoder(bank, S), rng.standard_normal((2, 3, 6, 5)), rng.standard_normal((2, 4, 4, 3)))
    bank = KernelBank.from_table(ConnectionTable.random(3, 4, 2, rng), 3, rng)
    _check_grads(TanhEncoder(bank), rng.standard_normal((2, 3, 6, 5)), rng.standard_normal((2, 4, 4, 3)))


def test_fit_step_zero_gradient_at_target(rng):
    enc = SiEncoder(rng.standard_normal((4, 6)))
    x = rng.standard_normal(6)
    before = {k: np.copy(v) for k, v in enc.parameters().items()}
    assert encoder_fit_step(enc, x, enc(x), 0.1) == 0.0
    for k, v in enc.parameters().items():
        np.testing.assert_array_equal(v, before[k])


@pytest.mark.parametrize("cls", [SiEncoder, TanhEncoder])
def test_fit_step_decreases_error(rng, cls):
    enc = cls(rng.standard_normal((5, 8)) * 0.3)
    x = rng.standard_normal(8)
    target = rng.standard_normal(5) * 0.5
    errs = [encoder_fit_step(enc, x, target, 0.01) for _ in range(100)]
    errs.append(prediction_error(enc, x, target))
    assert np.all(np.diff(errs) < 0)


def test_fit_step_loss_gradient(rng):
    # the gradient used by the step is that of ||z* - F(x)||^2
    enc = SiEncoder(rng.standard_normal((3, 4)))
    x = rng.standard_normal(4)
    target = rng.standard_normal(3)
    z, cache = enc.forward(x[None])
    _, grads = enc.backward(cache, 2.0 * (z - target))

    def f():
        return prediction_error(enc, x, target)

    assert rel_err(central_diff(f, enc.W), grads["W"]) < 1e-4
