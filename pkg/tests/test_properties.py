import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsefeat.network import parse_protocol
from sparsefeat.nonlin import soft_shrink
from sparsefeat.norm import NormConfig, local_cn
from sparsefeat.pooling import PoolSpec, pool
from sparsefeat.solver import soft_threshold
from sparsefeat.tensor import ConnectionTable, KernelBank, correlate_adjoint, correlate_valid

finite = st.floats(-50, 50, allow_nan=False)
small = settings(max_examples=40, deadline=None)


@small
@given(arrays(np.float64, 12, elements=finite), st.floats(0, 3), st.floats(0.1, 20))
def test_soft_shrink_odd_and_contracting(x, b, beta):
    y = soft_shrink(x, b, beta)
    np.testing.assert_allclose(soft_shrink(-x, b, beta), -y, atol=1e-12)
    assert np.all(np.abs(y) <= np.abs(x) + 1e-9)
    order = np.argsort(x)
    assert np.all(np.diff(y[order]) >= -1e-9)


@small
@given(arrays(np.float64, 10, elements=finite), st.floats(0, 5))
def test_soft_threshold_is_prox(v, t):
    z = soft_threshold(v, t)
    obj = lambda u: 0.5 * np.sum((u - v) ** 2) + t * np.sum(np.abs(u))
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert obj(z) <= obj(z + 0.1 * rng.standard_normal(z.shape)) + 1e-12


@small
@given(st.integers(0, 2**31), st.floats(0.05, 20))
def test_contrast_norm_scale_invariant(seed, a):
    x = np.random.default_rng(seed).standard_normal((2, 9, 9))
    cfg = NormConfig(window=5)
    np.testing.assert_allclose(local_cn(a * x, cfg), local_cn(x, cfg), atol=1e-9)


@small
@given(st.floats(-5, 5), st.sampled_from(["avg", "max"]), st.integers(1, 3), st.integers(1, 3))
def test_pool_of_constant(c, kind, w, s):
    assume(s <= w)
    out = pool(np.full((2, 7, 7), c), PoolSpec(kind, w, s))
    np.testing.assert_allclose(out, c, atol=1e-12)


@small
@given(st.integers(0, 2**31))
def test_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    bank = KernelBank.from_table(ConnectionTable.random(3, 4, 2, rng), 3, rng)
    x = rng.standard_normal((1, 3, 7, 7))
    z = rng.standard_normal((1, 4, 5, 5))
    lhs = np.sum(correlate_valid(x, bank) * z)
    rhs = np.sum(x * correlate_adjoint(z, bank, x.shape))
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


@small
@given(st.lists(st.tuples(st.sampled_from("RUD"), st.booleans()), min_size=2, max_size=2))
def test_protocol_roundtrip(tokens):
    text = "".join(t + ("+" if plus else "") for t, plus in tokens)
    parsed = parse_protocol(text, 2)
    assert [(p.init, p.finetune) for p in parsed] == list(tokens)
