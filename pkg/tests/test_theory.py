import numpy as np
import pytest

from scmd.errors import CapacityError, ContractError, ParameterError
from scmd.theory import (
    Hypothesis,
    avg_tv_to_set,
    check_finite_sample_bound,
    check_selection_comparison,
    check_tv_risk_bound,
    empirical_risk,
    rademacher_exact,
    risk,
    select_farthest_member,
    select_random_member,
    tv,
)


def test_tv_identity_and_max():
    assert tv([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert tv([1.0, 0.0], [0.0, 1.0]) == 2.0


def test_tv_support_mismatch():
    with pytest.raises(ParameterError):
        tv([1.0], [0.5, 0.5])


def test_tv_metric_properties(rng):
    for _ in range(10_000):
        p = rng.dirichlet(np.ones(5))
        q = rng.dirichlet(np.ones(5))
        r = rng.dirichlet(np.ones(5))
        assert tv(p, q) == tv(q, p)
        assert tv(p, r) <= tv(p, q) + tv(q, r) + 1e-12
        assert 0.0 <= tv(p, q) <= 2.0
    p = rng.dirichlet(np.ones(5))
    assert tv(p, p) == 0.0


def test_risk_endpoints():
    labeling = np.array([0, 1, 0, 1])
    p = np.full(4, 0.25)
    assert risk(Hypothesis(labels=labeling), p, labeling) == 0.0
    wrong = Hypothesis(labels=1 - labeling)
    assert risk(wrong, p, labeling) == 1.0
    half = Hypothesis(labels=np.array([0, 1, 1, 0]))
    assert risk(half, p, labeling) == 0.5


def test_risk_rejects_out_of_range_loss():
    with pytest.raises(ContractError):
        risk(Hypothesis(loss_table=np.array([0.5, 1.5])), [0.5, 0.5], None)


def test_empirical_risk_counts():
    labeling = np.array([0, 1, 0])
    h = Hypothesis(labels=np.array([0, 0, 0]))
    assert empirical_risk(h, labeling, [0, 1]) == 0.5
    assert empirical_risk(h, labeling, [0, 0, 2]) == 0.0
    with pytest.raises(ParameterError):
        empirical_risk(h, labeling, [])


def test_tv_risk_bound_reduces_to_equality_when_same():
    # P' == P: the bound holds with slack exactly tv = 0
    p = np.array([0.2, 0.3, 0.5])
    labeling = np.array([0, 1, 2])
    h = Hypothesis(labels=np.array([0, 2, 2]))
    assert risk(h, p, labeling) <= risk(h, p, labeling) + tv(p, p)


def test_tv_risk_bound_no_violations():
    out = check_tv_risk_bound(trials=20_000, support_size=8, seed=5)
    assert out["violations"] == 0
    assert out["max_excess"] <= 1e-12


def test_rademacher_singleton_constant_zero():
    assert rademacher_exact(np.zeros((1, 4))) == 0.0
    # any singleton has zero complexity: signs are symmetric around 0
    assert rademacher_exact(np.full((1, 6), 0.37)) == pytest.approx(0.0, abs=1e-15)


def test_rademacher_two_term_enumeration():
    # one hypothesis with loss 0, one with loss 1, single sample
    assert rademacher_exact(np.array([[0.0], [1.0]])) == 0.5


def test_rademacher_monotone_in_class(rng):
    for _ in range(50):
        n = int(rng.integers(2, 8))
        base = rng.uniform(size=(int(rng.integers(1, 6)), n))
        extra = rng.uniform(size=(1, n))
        bigger = np.vstack([base, extra])
        assert rademacher_exact(bigger) >= rademacher_exact(base) - 1e-15


def test_rademacher_capacity_limits():
    with pytest.raises(CapacityError):
        rademacher_exact(np.zeros((1, 15)))
    with pytest.raises(CapacityError):
        rademacher_exact(np.zeros((65, 4)))


def test_finite_sample_bound_singleton_same_distribution(rng):
    # P' = P with one hypothesis: the classic single-function bound
    k = 8
    p = rng.dirichlet(np.ones(k))
    labeling = rng.integers(0, 2, size=k)
    h = Hypothesis(labels=rng.integers(0, 2, size=k))
    out = check_finite_sample_bound([h], p, p, labeling, n=10, delta=0.1,
                                    resamples=400, seed=0)
    allowed = 0.1 + 3 * np.sqrt(0.1 * 0.9 / 400)
    assert out["violation_rate"] <= allowed


def test_finite_sample_bound_vacuous_delta(rng):
    k = 6
    p = rng.dirichlet(np.ones(k))
    labeling = rng.integers(0, 2, size=k)
    hs = [Hypothesis(labels=rng.integers(0, 2, size=k)) for _ in range(4)]
    out = check_finite_sample_bound(hs, p, p, labeling, n=8, delta=0.999,
                                    resamples=100, seed=1)
    assert out["violation_rate"] <= 0.999 + 3 * np.sqrt(0.999 * 0.001 / 100)


def test_tail_term_shrinks_with_sqrt_n():
    tail = lambda n, d: np.sqrt(np.log(1 / d) / (2 * n))
    assert tail(10, 0.1) / tail(20, 0.1) == pytest.approx(np.sqrt(2.0), abs=1e-12)


def test_avg_tv_identical_family(rng):
    p = rng.dirichlet(np.ones(4))
    q = rng.dirichlet(np.ones(4))
    family = [p.copy(), p.copy(), p.copy()]
    assert avg_tv_to_set(q, family) == pytest.approx(tv(q, p), abs=1e-15)
    assert avg_tv_to_set(p, [p]) == 0.0


def test_avg_tv_matches_direct_loop(rng):
    for _ in range(1000):
        m = int(rng.integers(1, 6))
        family = [rng.dirichlet(np.ones(4)) for _ in range(m)]
        q = rng.dirichlet(np.ones(4))
        want = sum(np.abs(q - member).sum() for member in family) / m
        assert avg_tv_to_set(q, family) == pytest.approx(want, abs=1e-12)


def test_select_farthest_prefers_outlier():
    tight = [np.array([0.5, 0.5, 0.0]) for _ in range(3)]
    outlier = np.array([0.0, 0.0, 1.0])
    family = tight + [outlier]
    assert select_farthest_member(family) == 3


def test_selectors_on_singleton():
    family = [np.array([1.0, 0.0])]
    assert select_farthest_member(family) == 0
    assert select_random_member(family, seed=9) == 0


def test_random_selector_is_uniform():
    family = [np.array([1.0, 0.0]), np.array([0.0, 1.0]),
              np.array([0.5, 0.5]), np.array([0.25, 0.75])]
    counts = np.zeros(4)
    n = 8000
    for s in range(n):
        counts[select_random_member(family, seed=s)] += 1
    expected = n / 4
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert (np.abs(counts - expected) < 3 * sigma).all()


def test_selection_comparison_equal_alphas_tie():
    out = check_selection_comparison(trials=200, seed=3, m=4,
                                     cluster_range=(0.3, 0.3),
                                     outlier_range=(0.3, 0.3))
    assert out["e_tv_farthest"] == pytest.approx(out["e_tv_random"], abs=1e-12)


def test_selection_comparison_single_member_zero_residual():
    out = check_selection_comparison(trials=50, seed=4, m=1,
                                     cluster_range=(0.2, 0.4),
                                     outlier_range=(0.2, 0.4))
    assert out["assumption_residual_max"] == pytest.approx(0.0, abs=1e-12)
    assert out["e_tv_farthest"] == pytest.approx(out["e_tv_random"], abs=1e-12)


def test_selection_comparison_outlier_regime():
    # cluster far from the test distribution, one member close to it: the
    # farthest-from-family pick lands on that member
    out = check_selection_comparison(trials=2000, seed=0, m=4,
                                     cluster_range=(0.05, 0.25),
                                     outlier_range=(0.8, 0.95))
    assert out["comparison_holds"]
    assert out["e_tv_farthest"] < out["e_tv_random"]
    assert out["assumption_residual_max"] > 0.0  # reported, not hidden
