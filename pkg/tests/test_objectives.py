import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fecosr import objectives as O


def unit_rows(rng, n, d):
    x = torch.tensor(rng.standard_normal((n, d)))
    return x / x.norm(dim=1, keepdim=True)


def test_ce_examples():
    assert math.isclose(float(O.ce_loss(torch.zeros(4, dtype=torch.float64), 0)), math.log(4), abs_tol=1e-12)
    s = torch.zeros(5, dtype=torch.float64)
    s[2] = 50.0
    assert float(O.ce_loss(s, 2)) < 1e-20
    # frozen oracle: -log softmax([1,2,3])[2]
    assert round(float(O.ce_loss(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64), 2)), 6) == 0.407606


def test_semantic_target_examples():
    # cosines to the target {1, .5, 0}: build unit vectors with those dot products
    table = torch.tensor([[1.0, 0.0], [0.5, math.sqrt(0.75)], [0.0, 1.0]], dtype=torch.float64)
    q = O.semantic_targets(table, 0, 0.5)
    np.testing.assert_allclose(q.numpy(), [0.66524, 0.24473, 0.09003], atol=5e-6)
    equal = torch.tensor([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    np.testing.assert_allclose(O.semantic_targets(equal, 1, 0.05).numpy(), [1 / 3] * 3, atol=1e-12)
    with pytest.raises(O.ObjectiveError):
        O.semantic_targets(table, 0, 0.0)


def test_s2ce_examples():
    q = torch.tensor([0.5, 0.3, 0.2], dtype=torch.float64)
    assert math.isclose(float(O.s2ce_loss(torch.zeros(3, dtype=torch.float64), q)), math.log(3), abs_tol=1e-12)
    scores = torch.log(q) + 1.7
    assert math.isclose(float(O.s2ce_loss(scores, q)), float(O.entropy(q)), abs_tol=1e-12)
    assert abs(float(O.kl_divergence(q, torch.softmax(scores, -1)))) < 1e-12


def test_nonfinite_scores_raise():
    with pytest.raises(FloatingPointError):
        O.ce_loss(torch.tensor([0.0, float("nan")]), 0)


def test_onehot_identity_and_tau_limit_bulk():
    """1,000 random instances of each identity."""
    rng = np.random.default_rng(0)
    worst_id, worst_tv = 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 50))
        s = torch.tensor(rng.normal(scale=5, size=n))
        t = int(rng.integers(n))
        worst_id = max(worst_id, abs(float(O.s2ce_loss(s, torch.nn.functional.one_hot(torch.tensor(t), n).double()) - O.ce_loss(s, t))))
        table = unit_rows(rng, n, 8)
        q = O.semantic_targets(table, t, 1e-4)
        onehot = torch.zeros(n, dtype=torch.float64)
        onehot[t] = 1
        worst_tv = max(worst_tv, 0.5 * float((q - onehot).abs().sum()))
    assert worst_id < 1e-12
    assert worst_tv < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10_000), st.floats(-3, 3))
def test_shift_invariance(n, seed, c):
    rng = np.random.default_rng(seed)
    cos = torch.tensor(rng.uniform(-1, 1, n))
    a = torch.softmax(cos / 0.1, -1)
    b = torch.softmax((cos + c) / 0.1, -1)
    assert torch.allclose(a, b, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10_000))
def test_s2ce_gradient_is_softmax_minus_q(n, seed):
    rng = np.random.default_rng(seed)
    s = torch.tensor(rng.normal(size=n))
    q = torch.softmax(torch.tensor(rng.normal(size=n)), -1)
    g = O.s2ce_grad(s, q)
    assert torch.allclose(g, torch.softmax(s, -1) - q, atol=1e-15)
    h = 1e-6
    for i in range(n):
        e = torch.zeros(n, dtype=torch.float64)
        e[i] = h
        num = (float(O.s2ce_loss(s + e, q)) - float(O.s2ce_loss(s - e, q))) / (2 * h)
        assert abs(num - float(g[i])) <= 1e-6 * max(abs(num), abs(float(g[i])), 1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10_000), st.floats(0.01, 1.0), st.floats(1.01, 5.0))
def test_monotone_softening(n, seed, tau1, ratio):
    rng = np.random.default_rng(seed)
    table = unit_rows(rng, n, 6)
    t = int(rng.integers(n))
    uni = torch.full((n,), 1.0 / n, dtype=torch.float64)
    tv1 = 0.5 * float((O.semantic_targets(table, t, tau1) - uni).abs().sum())
    tv2 = 0.5 * float((O.semantic_targets(table, t, tau1 * ratio) - uni).abs().sum())
    assert tv1 >= tv2 - 1e-12


def test_target_is_mode_but_not_one():
    rng = np.random.default_rng(4)
    table = unit_rows(rng, 10, 4)
    q = O.semantic_targets(table, 3, 0.5)
    assert int(q.argmax()) == 3 and float(q[3]) < 1.0


def test_soft_target_cache_matches_direct():
    rng = np.random.default_rng(1)
    table = unit_rows(rng, 20, 5).float()
    st_ = O.SoftTargets(table, 0.1, cache_size=3)
    tg = torch.tensor([1, 4, 1, 7, 9, 4, 0])
    np.testing.assert_allclose(st_(tg).numpy(), O.semantic_targets(table, tg, 0.1).numpy(), atol=1e-7)
    spec = O.SoftTargetSpec(0.1, 4, table)
    np.testing.assert_allclose(spec.distribution().numpy(), O.semantic_targets(table, 4, 0.1).numpy(), atol=1e-7)


def test_ce_grad():
    s = torch.tensor([0.3, -1.0, 2.0], dtype=torch.float64)
    g = O.ce_grad(s, 1)
    expected = torch.softmax(s, -1)
    expected[1] -= 1
    assert torch.allclose(g, expected, atol=1e-15)


def test_tau_grid():
    assert len(O.TAU_GRID) == 10
    np.testing.assert_allclose(O.TAU_GRID, np.arange(1, 11) / 100)
    assert O.DEFAULT_TAU == 0.05
