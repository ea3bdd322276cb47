import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptroute.significance import StatisticalError, mann_whitney_u, t_test_two_tailed
from oracles import mann_whitney_reference, welch_reference

A = (1, 2, 3, 4, 5)
B = (2, 3, 4, 5, 6)

# frozen from tests/oracles.py
WELCH_P = 0.34659350708733433
MWU_U = 8.0
MWU_P = 0.3412872189781526
MWU_P_EXACT = 0.4444444444444444


def test_welch_hand_example():
    r = t_test_two_tailed(A, B)
    assert r.statistic == pytest.approx(-1.0, abs=1e-12)
    assert r.df == pytest.approx(8.0, abs=1e-12)
    assert r.p_value == pytest.approx(WELCH_P, abs=1e-10)
    assert r.test == "t_test_two_tailed" and (r.n_a, r.n_b) == (5, 5)


def test_welch_edges():
    assert t_test_two_tailed(A, A).statistic == 0.0
    assert t_test_two_tailed(A, A).p_value == 1.0
    tight = t_test_two_tailed([0.90, 0.901, 0.899], [0.50, 0.501, 0.499])
    assert tight.p_value < 1e-3 and tight.statistic > 0
    with pytest.raises(StatisticalError):
        t_test_two_tailed([1.0], [1.0, 2.0])
    with pytest.raises(StatisticalError):
        t_test_two_tailed([1.0, 1.0], [2.0, 2.0])


def test_mann_whitney_enumeration_example():
    r = mann_whitney_u(A, B)
    assert r.statistic == MWU_U
    assert r.p_value == pytest.approx(MWU_P, abs=1e-10)
    assert mann_whitney_u(A, B, "exact").p_value == pytest.approx(MWU_P_EXACT, abs=1e-12)


def test_mann_whitney_edges():
    assert mann_whitney_u([1, 2, 3], [4, 5, 6]).statistic == 0.0
    same = mann_whitney_u([3, 3, 3], [3, 3, 3])
    assert same.statistic == 4.5 and same.p_value == 1.0
    assert mann_whitney_u(A, A).p_value == 1.0
    with pytest.raises(StatisticalError):
        mann_whitney_u([], [1.0])
    with pytest.raises(ValueError):
        mann_whitney_u(A, B, "bootstrap")


samples = st.lists(st.integers(0, 6).map(lambda v: v / 6), min_size=2, max_size=5)


@settings(max_examples=150, deadline=None)
@given(samples, samples)
def test_mann_whitney_matches_oracle(a, b):
    r = mann_whitney_u(a, b)
    u, p_norm, p_exact = mann_whitney_reference(a, b)
    assert r.statistic == pytest.approx(u, abs=1e-6)
    assert r.p_value == pytest.approx(p_norm, abs=1e-4)
    assert mann_whitney_u(a, b, "exact").p_value == pytest.approx(p_exact, abs=1e-4)
    assert 0.0 <= r.p_value <= 1.0


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0, 1), min_size=2, max_size=6),
    st.lists(st.floats(0, 1), min_size=2, max_size=6),
)
def test_welch_matches_oracle(a, b):
    if np.var(a) < 1e-6 or np.var(b) < 1e-6:
        return
    r = t_test_two_tailed(a, b)
    t, df, p = welch_reference(a, b)
    assert r.statistic == pytest.approx(t, abs=1e-6)
    assert r.df == pytest.approx(df, rel=1e-9)
    assert r.p_value == pytest.approx(p, abs=1e-4)


@given(samples, samples)
def test_swapping_samples_mirrors_the_result(a, b):
    ab, ba = mann_whitney_u(a, b), mann_whitney_u(b, a)
    assert ab.statistic + ba.statistic == len(a) * len(b)
    assert ab.p_value == pytest.approx(ba.p_value, abs=1e-12)
    if np.var(a) > 0 and np.var(b) > 0:
        tab, tba = t_test_two_tailed(a, b), t_test_two_tailed(b, a)
        assert tab.statistic == pytest.approx(-tba.statistic)
        assert tab.p_value == pytest.approx(tba.p_value)
