import numpy as np
import pytest

from sparsefeat.exceptions import DimensionError, ParameterError
from sparsefeat.norm import (
    NormConfig,
    divisive_norm,
    gaussian_kernel,
    local_cn,
    local_cn_backward,
    local_cn_forward,
    subtractive_norm,
)

from oracles import central_diff, rel_err

CFG = NormConfig()


def test_gaussian_normalised():
    g = gaussian_kernel(9, 1.6)
    assert abs(g.sum() - 1) < 1e-15 and g.shape == (9, 9)


def test_subtractive_constant():
    assert np.max(np.abs(subtractive_norm(np.full((3, 20, 20), 2.5)))) < 1e-12


def test_subtractive_impulse():
    t = np.zeros((1, 21, 21))
    t[0, 10, 10] = 1.0
    g = gaussian_kernel(9, 1.6)
    assert abs(subtractive_norm(t)[0, 10, 10] - (1 - g[4, 4])) < 1e-14


def test_subtractive_mean_of_noise():
    t = np.random.default_rng(0).standard_normal((1, 64, 64))
    assert abs(subtractive_norm(t).mean()) < 0.01


def test_divisive_zero_input():
    out = divisive_norm(np.zeros((2, 12, 12)))
    assert np.all(out == 0)


def test_divisive_scale_invariance(rng):
    t = rng.standard_normal((2, 16, 16))
    cfg = NormConfig(floor_mode="constant", floor=1e-3)
    np.testing.assert_allclose(divisive_norm(3.0 * t, cfg), divisive_norm(t, cfg), rtol=1e-12)


def test_divisive_unit_local_std():
    t = subtractive_norm(np.random.default_rng(5).standard_normal((1, 64, 64)) * 4.0)
    out = divisive_norm(t)
    interior = out[0, 8:-8, 8:-8]
    assert abs(interior.std() - 1.0) < 0.1


def test_local_cn_constant_and_valid_shape():
    assert np.max(np.abs(local_cn(np.full((1, 30, 30), 7.0)))) < 1e-8
    assert local_cn(np.random.default_rng(0).random((1, 151, 151)), CFG, "valid").shape == (1, 143, 143)


def test_idempotent_on_noise():
    t = np.random.default_rng(3).standard_normal((1, 48, 48))
    once = local_cn(t)
    twice = local_cn(once)
    assert np.linalg.norm(twice - once) / np.linalg.norm(once) < 0.15


def test_window_checks():
    with pytest.raises(DimensionError):
        local_cn(np.zeros((1, 5, 5)))
    with pytest.raises(ParameterError):
        NormConfig(window=4)


@pytest.mark.parametrize("floor_mode", ["mean", "constant"])
def test_backward_finite_differences(rng, floor_mode):
    cfg = NormConfig(5, 1.2, floor_mode=floor_mode, floor=0.8)
    x = rng.standard_normal((2, 3, 7, 8))
    x[:, :, :3] *= 0.2  # low-contrast band so both branches of the max occur
    w = rng.standard_normal((2, 3, 7, 8))
    out, cache = local_cn_forward(x, cfg)
    g = local_cn_backward(w, cache, cfg)

    def f():
        return float(np.sum(local_cn_forward(x, cfg)[0] * w))

    assert rel_err(central_diff(f, x), g) < 1e-4
