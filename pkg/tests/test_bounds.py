import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from archdilate.bounds import (BoundCheck, FiniteHypothesis, LabeledDomain, adv_error, adv_exp_surrogate,
                               check_adv_surrogate, check_lemma1, check_surrogate, check_theorem1,
                               check_theorem2, exp_surrogate, network_as_hypothesis, random_trials, std_error)
from archdilate.tensor import NumericalError


def singleton_domain(labels):
    n = len(labels)
    return LabeledDomain(np.arange(n), labels, np.full(n, 1.0 / n), [[i] for i in range(n)])


def random_case(r, n=16, radius=2):
    labels = r.choice([-1.0, 1.0], size=n)
    w = r.uniform(size=n)
    return LabeledDomain.index_balls(labels, w / w.sum(), radius), r.uniform(-3, 3, n), r.uniform(-3, 3, n)


def test_domain_validation():
    with pytest.raises(ValueError):
        LabeledDomain([0, 1], [1, 0], [0.5, 0.5], [[0], [1]])
    with pytest.raises(ValueError):
        LabeledDomain([0, 1], [1, -1], [0.5, 0.6], [[0], [1]])
    with pytest.raises(ValueError):
        LabeledDomain([0, 1], [1, -1], [0.5, 0.5], [[1], [1]])
    with pytest.raises(ValueError):
        LabeledDomain([0, 1], [1, -1], [0.5, 0.5], [[0, 2], [1]])
    with pytest.raises(ValueError):
        FiniteHypothesis(np.arange(2), [0.0, np.inf])
    with pytest.raises(ValueError):
        FiniteHypothesis(np.arange(0), [])


def test_linf_balls_contain_close_points_only():
    dom = LabeledDomain.linf_balls([[0.0, 0.0], [0.05, 0.0], [0.5, 0.5]], [1, -1, 1], eps=0.1)
    assert sorted(dom.neighbors[0].tolist()) == [0, 1]
    assert set(dom.neighbors[2].tolist()) == {2}


def test_error_examples():
    y = np.array([1.0, -1.0, 1.0, -1.0])
    dom = LabeledDomain.index_balls(y, radius=1)
    assert std_error(y, dom) == 0.0
    assert std_error(-y, dom) == 1.0
    assert std_error(np.zeros(4), dom) == 1.0
    assert adv_error(np.zeros(4), dom) == 1.0
    # a correct scorer is wrong at neighbors of the other class under index balls,
    # but correct everywhere when every ball is a singleton
    sdom = singleton_domain(y)
    assert adv_error(y, sdom) == 0.0
    assert adv_error(y * 5, sdom) == std_error(y * 5, sdom)


def test_surrogate_examples():
    y = np.array([1.0, -1.0, -1.0])
    dom = singleton_domain(y)
    assert exp_surrogate(np.zeros(3), dom) == 1.0
    assert exp_surrogate(y, dom) == pytest.approx(math.exp(-1), rel=1e-15)
    with pytest.raises(NumericalError):
        exp_surrogate(-y * 800, dom)


def test_random_set_inclusion_and_surrogates():
    r = np.random.default_rng(0)
    for _ in range(1000):
        dom, h, _ = random_case(r)
        s, a = std_error(h, dom), adv_error(h, dom)
        assert 0.0 <= s <= a <= 1.0
        assert check_surrogate(h, dom).holds
        assert check_adv_surrogate(h, dom).holds
        assert adv_exp_surrogate(h, dom) >= exp_surrogate(h, dom)


def test_singleton_balls_make_adv_error_equal_std_error():
    r = np.random.default_rng(1)
    for _ in range(100):
        y = r.choice([-1.0, 1.0], size=10)
        h = r.uniform(-3, 3, size=10)
        dom = singleton_domain(y)
        assert adv_error(h, dom) == std_error(h, dom)


def test_theorem1_examples():
    r = np.random.default_rng(2)
    dom, hb, _ = random_case(r)
    lhs, rhs, margin, holds = check_theorem1(hb, np.zeros_like(hb), dom)
    assert lhs == std_error(hb, dom) and rhs == pytest.approx(lhs + 1.0, abs=1e-15) and holds
    c = check_theorem1(hb, hb, dom)
    assert c.lhs == std_error(hb, dom)
    assert c.margin == pytest.approx(float(np.sum(dom.weights * np.exp(-hb * hb))), rel=1e-12)
    assert c.margin > 0


def test_lemma1_zero_hypothesis_is_tight():
    dom = LabeledDomain.index_balls(np.array([1.0, -1.0, 1.0]), radius=1)
    c = check_lemma1(np.zeros(3), dom)
    assert c.lhs == 1.0 and c.rhs == 1.0 and c.holds


def test_lemma1_fails_on_singleton_balls():
    # With B = {x} the right side is e^{-y h} e^{-h^2}, strictly below the left side
    # whenever h != 0, so the inequality cannot hold on degenerate neighborhoods.
    y = np.array([1.0, -1.0, 1.0, -1.0])
    h = np.array([1.0, -1.0, -1.0, 1.0])
    c = check_lemma1(h, singleton_domain(y))
    assert c.lhs == pytest.approx(math.e * c.rhs, rel=1e-14)
    assert c.lhs == pytest.approx((math.exp(-1) + math.exp(1)) / 2, rel=1e-14)
    assert not c.holds


def test_theorem2_fails_with_zero_dilation_on_singleton_balls():
    # h_d = 0, B = {x}: rhs = R_std(h_b) + E[e^{-y h_b}(e^{-h_b^2} - 1)] < R_std(h_b) = lhs
    y = np.array([1.0, -1.0])
    hb = np.array([-1.0, -1.0])
    c = check_theorem2(hb, np.zeros(2), singleton_domain(y))
    assert c.lhs == 0.5
    assert c.rhs == pytest.approx(0.5 + 0.5 * (math.e + math.exp(-1)) * (math.exp(-1) - 1), rel=1e-14)
    assert not c.holds


def test_theorem2_dilation_correcting_backbone():
    y = np.array([1.0, 1.0, -1.0, -1.0])
    dom = LabeledDomain(np.arange(4), y, np.full(4, 0.25), [[0, 1], [0, 1], [2, 3], [2, 3]])
    hb = np.array([-0.5, 2.0, -2.0, -2.0])  # wrong on point 0
    hd = np.array([2.0, 1.0, -1.0, -1.0])   # hybrid right on every ball
    c = check_theorem2(hb, hd, dom)
    assert adv_error(hb + hd, dom) == 0.0 < adv_error(hb, dom)
    assert c.lhs == 0.0 and c.holds
    assert np.exp(-y * hd).max() < 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 24), st.integers(1, 4))
def test_inequalities_hold_on_random_cases(seed, n, radius):
    dom, hb, hd = random_case(np.random.default_rng(seed), n, radius)
    assert check_surrogate(hb, dom).holds
    assert check_adv_surrogate(hb, dom).holds
    assert check_theorem1(hb, hd, dom).holds


def test_checks_are_pure():
    r = np.random.default_rng(3)
    dom, hb, hd = random_case(r)
    hb0 = hb.copy()
    a = tuple(check_theorem2(hb, hd, dom))
    b = tuple(check_theorem2(hb, hd, dom))
    assert a == b
    np.testing.assert_array_equal(hb, hb0)


def test_bound_check_tuple_protocol():
    lhs, rhs, margin, holds = BoundCheck(1.0, 1.0 - 1e-13)
    assert holds and margin == pytest.approx(-1e-13)
    assert not BoundCheck(1.0, 0.9).holds


def test_network_bridge():
    pts = np.arange(6.0).reshape(3, 2)
    h = network_as_hypothesis(lambda x: np.stack([x[:, 0], x[:, 0]], axis=1), (0, 1), pts)
    np.testing.assert_array_equal(h.values, 0.0)
    h = network_as_hypothesis(lambda x: x, (1, 0), pts)
    np.testing.assert_array_equal(h.values, 1.0)


def test_random_trials_small_run():
    out = random_trials(trials=200, points=64, seed=5)
    assert [s.name for s in out] == ["exp_surrogate", "adv_exp_surrogate", "theorem1", "lemma1", "theorem2"]
    assert all(s.passed and s.worst_violation <= 1e-12 for s in out)
