import numpy as np
import pytest

from sparsefeat.exceptions import ConfigError, DimensionError
from sparsefeat.invert import (
    InversionTask,
    build_inversion_arch,
    hallucinate,
    inversion_loss,
    normalized_mse,
    record_target,
    small_inversion_arch,
    without_norm,
)
from sparsefeat.network import Network, shape_chain, toy_arch

from oracles import rel_err, sampled_diff


@pytest.fixture
def net(rng):
    return Network.random(*toy_arch(), 2, rng)


def test_inversion_arch_shapes():
    shape, stages = build_inversion_arch()
    assert shape_chain(shape, stages) == [(1, 143, 143), (64, 66, 66), (128, 28, 28)]
    _, off = build_inversion_arch(cn=False)
    assert [s.norm for s in off] == ["none", "none"]
    assert [s.to_dict() | {"norm": "none"} for s in stages] == [s.to_dict() for s in off]
    shape, stages = small_inversion_arch()
    assert shape_chain(shape, stages)[-1] == (128, 6, 6)


def test_without_norm_same_filters(net):
    off = without_norm(net)
    assert all(s.cfg.norm == "none" for s in off.stages)
    np.testing.assert_array_equal(off.stages[1].encoder.bank.weights, net.stages[1].encoder.bank.weights)
    assert net.stages[0].cfg.norm == "before-pool"


@pytest.mark.parametrize("site", ["output", "pre-pool"])
def test_input_gradient(net, rng, site):
    x = rng.standard_normal(net.input_shape)
    target = record_target(net, rng.standard_normal(net.input_shape), site)
    _, g = inversion_loss(net, x, target, site)
    idx = [tuple(rng.integers(d) for d in x.shape) for _ in range(8)]
    num = sampled_diff(lambda: inversion_loss(net, x, target, site, need_grad=False)[0], x, idx)
    assert rel_err(num, [g[i] for i in idx]) < 1e-4


def test_original_init_is_fixed_point(net, rng):
    x = rng.standard_normal(net.input_shape)
    img, trace = hallucinate(net, record_target(net, x), init=x)
    assert trace == [0.0]
    np.testing.assert_array_equal(img, x)


def test_monotone_and_frozen(net, rng):
    x = rng.standard_normal(net.input_shape)
    _, before = net.state()
    for seed in range(3):
        _, trace = hallucinate(InversionTask(net, record_target(net, x), steps=40, random_state=seed))
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert trace[-1] < trace[0]
    _, after = net.state()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_seeded(net, rng):
    t = record_target(net, rng.standard_normal(net.input_shape))
    a, _ = hallucinate(net, t, steps=5, random_state=1)
    b, _ = hallucinate(net, t, steps=5, random_state=1)
    assert a.tobytes() == b.tobytes()


def test_bad_tasks(net):
    with pytest.raises(DimensionError):
        InversionTask(net, np.zeros((4, 2, 2)))
    with pytest.raises(ConfigError):
        InversionTask(net, np.zeros((4, 1, 1)), site="middle")
    with pytest.raises(ConfigError):
        hallucinate(net, np.zeros((4, 1, 1)), init="zeros")


def test_zero_gradient_reseeds_then_reports(net, caplog):
    for s in net.stages:
        s.encoder.bank.weights[:] = 0.0
    t = np.ones((4, 1, 1))
    img, trace = hallucinate(net, t, steps=5, random_state=0)
    assert len(trace) == 1 and "re-seeding" in caplog.text


def test_normalized_mse():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((1, 5, 5))
    assert normalized_mse(a, 3 * a + 1) < 1e-20
    assert normalized_mse(a, -a) < 1e-20
    assert normalized_mse(a, rng.standard_normal((1, 5, 5))) > 0.5
