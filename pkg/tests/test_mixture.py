import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmm_augment.errors import BadModelFile, DimensionMismatch, EmptyDataset
from bmm_augment.mixture import (
    EPS,
    BernoulliMixture,
    EMConfig,
    aic_score,
    component_log_pmf,
    e_step,
    fit_em,
    free_parameters,
    log_likelihood,
    loglik_in_base,
    m_step,
    mixture_log_pmf,
    parse_model,
    select_k,
    serialize_model,
)
from oracles import brute_loglik as brute_force_loglik


def random_model(rng, K, D):
    pi = rng.dirichlet(np.ones(K))
    return BernoulliMixture(pi, rng.uniform(0.05, 0.95, size=(K, D)))


def test_component_log_pmf_examples():
    assert component_log_pmf([1, 0], [0.5, 0.5]) == pytest.approx(-1.386294, abs=1e-6)
    # 0.9 * (1 - 0.2) * 0.7 = 0.504
    assert component_log_pmf([1, 0, 1], [0.9, 0.2, 0.7]) == pytest.approx(math.log(0.504), abs=1e-12)
    p = np.array([EPS, 1 - EPS, 1 - EPS, EPS])
    assert component_log_pmf(np.rint(p), p) == pytest.approx(4 * math.log1p(-EPS), abs=1e-15)
    with pytest.raises(DimensionMismatch):
        component_log_pmf([1, 0], [0.5])


def test_mixture_log_pmf_examples():
    p = np.array([[0.3, 0.8, 0.6]])
    x = np.array([1, 1, 0])
    single = BernoulliMixture([1.0], p)
    assert mixture_log_pmf(x, single) == pytest.approx(component_log_pmf(x, p[0]), abs=1e-14)
    doubled = BernoulliMixture([0.5, 0.5], np.vstack([p, p]))
    assert mixture_log_pmf(x, doubled) == pytest.approx(component_log_pmf(x, p[0]), abs=1e-14)
    two = BernoulliMixture([0.5, 0.5], [[0.9], [0.1]])
    assert mixture_log_pmf([1], two) == pytest.approx(math.log(0.5), abs=1e-14)


def test_zero_weight_component_is_skipped():
    model = BernoulliMixture([1.0, 0.0], [[0.9], [0.1]])
    assert mixture_log_pmf([1], model) == pytest.approx(math.log(0.9))


def test_log_likelihood_examples():
    model = BernoulliMixture([0.4, 0.6], [[0.9, 0.2], [0.3, 0.7]])
    assert log_likelihood(np.zeros((0, 2)), model) == 0.0
    x = np.array([1, 0])
    X = np.tile(x, (5, 1))
    assert log_likelihood(X, model) == pytest.approx(5 * mixture_log_pmf(x, model), rel=1e-14)
    X3 = np.array([[1, 0], [0, 0], [1, 1]])
    assert log_likelihood(X3, model) == pytest.approx(
        brute_force_loglik(X3, model.pi, model.p), rel=1e-12)
    with pytest.raises(DimensionMismatch):
        log_likelihood(np.zeros((2, 3)), model)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_log_likelihood_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    K, D, N = rng.integers(1, 5), rng.integers(1, 17), rng.integers(1, 11)
    model = random_model(rng, K, D)
    X = rng.integers(0, 2, size=(N, D))
    expected = brute_force_loglik(X, model.pi, model.p)
    assert log_likelihood(X, model) == pytest.approx(expected, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 4, 12)
    X = rng.integers(0, 2, size=(30, 12))
    perm = rng.permutation(4)
    a, b = log_likelihood(X, model), log_likelihood(X, model.permuted(perm))
    assert abs(a - b) <= 1e-12 * abs(a)


def test_e_step_examples():
    X = np.array([[1, 0], [0, 1], [1, 1]])
    assert np.all(e_step(X, BernoulliMixture([1.0], [[0.3, 0.6]])) == 1.0)
    sym = BernoulliMixture([1 / 3] * 3, np.tile([0.3, 0.6], (3, 1)))
    np.testing.assert_allclose(e_step(X, sym), 1 / 3, rtol=1e-14)
    two = BernoulliMixture([0.5, 0.5], [[0.9], [0.1]])
    # Bayes: 0.5*0.9 / (0.5*0.9 + 0.5*0.1)
    np.testing.assert_allclose(e_step([[1]], two), [[0.9, 0.1]], atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_e_step_rows_normalized(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 5, 50)
    gamma = e_step(rng.integers(0, 2, size=(20, 50)), model)
    assert np.all((gamma >= 0) & (gamma <= 1))
    np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-12)


def test_e_step_survives_underflow():
    # 784 pixels at near-deterministic parameters: raw probabilities underflow
    rng = np.random.default_rng(3)
    p = np.clip(rng.integers(0, 2, size=(3, 784)).astype(float), EPS, 1 - EPS)
    gamma = e_step(rng.integers(0, 2, size=(4, 784)), BernoulliMixture(np.ones(3) / 3, p))
    assert np.all(np.isfinite(gamma))
    np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-12)


def test_m_step_examples():
    X = np.array([[1, 0, 1], [1, 1, 0], [0, 0, 0], [1, 0, 0]])
    one = m_step(X, np.ones((4, 1)))
    assert one.pi.tolist() == [1.0]
    np.testing.assert_allclose(one.p[0], np.clip(X.mean(axis=0), EPS, 1 - EPS))

    hard = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
    model = m_step(X, hard)
    np.testing.assert_allclose(model.pi, [0.5, 0.5])
    np.testing.assert_allclose(model.p[0], [1 - EPS, 0.5, 0.5])
    np.testing.assert_allclose(model.p[1], [0.5, EPS, EPS])

    two_rows = np.array([[1, 0, 1], [0, 0, 1]])
    soft = m_step(two_rows, np.full((2, 2), 0.5))
    np.testing.assert_allclose(soft.p, np.clip([[0.5, 0, 1], [0.5, 0, 1]], EPS, 1 - EPS))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_m_step_pi_normalized_and_clamped(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(25, 8))
    gamma = rng.dirichlet(np.ones(4), size=25)
    model = m_step(X, gamma)
    assert abs(model.pi.sum() - 1.0) <= 1e-12
    assert np.all((model.p >= EPS) & (model.p <= 1 - EPS))


def test_m_step_reseeds_empty_component():
    X = np.array([[1, 0], [0, 1]])
    gamma = np.array([[1.0, 0.0], [1.0, 0.0]])
    model = m_step(X, gamma, np.random.default_rng(0))
    assert np.all(np.isfinite(model.p))
    assert np.all((model.p[1] >= 0.25) & (model.p[1] <= 0.75))
    assert model.pi[1] == pytest.approx((1 / 2) / (1 + 1 / 2))
    assert abs(model.pi.sum() - 1) < 1e-12


def test_fit_k1_closed_form():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 2, size=(40, 6))
    result = fit_em(X, 1, seed=5)
    assert result.iterations <= 2 and result.converged
    np.testing.assert_allclose(result.model.p[0], np.clip(X.mean(axis=0), EPS, 1 - EPS))


def test_fit_recovers_separated_clusters():
    a = np.array([1, 1, 1, 1, 0, 0, 0, 0, 1, 0])
    b = 1 - a
    X = np.vstack([np.tile(a, (30, 1)), np.tile(b, (10, 1))])
    result = fit_em(X, 2, seed=1)
    order = np.argsort(-result.model.pi)
    model = result.model.permuted(order)
    np.testing.assert_allclose(model.pi, [0.75, 0.25], atol=1e-9)
    np.testing.assert_allclose(model.p[0], np.clip(a, EPS, 1 - EPS), atol=1e-9)
    np.testing.assert_allclose(model.p[1], np.clip(b, EPS, 1 - EPS), atol=1e-9)


def test_fit_is_deterministic_and_monotone():
    rng = np.random.default_rng(11)
    X = rng.integers(0, 2, size=(120, 30))
    config = EMConfig(max_iter=50, rel_tol=1e-9)
    a, b = fit_em(X, 4, 3, config), fit_em(X, 4, 3, config)
    assert a.loglik_trace == b.loglik_trace
    assert np.array_equal(a.model.p, b.model.p)
    trace = np.array(a.loglik_trace)
    assert np.all(trace[1:] >= trace[:-1] - 1e-8 * np.abs(trace[:-1]))
    assert a.loglik == pytest.approx(log_likelihood(X, a.model), rel=1e-12)


def test_fit_errors_and_warnings():
    with pytest.raises(EmptyDataset):
        fit_em(np.zeros((0, 3)), 2)
    with pytest.warns(UserWarning):
        fit_em(np.array([[1, 0]]), 3, config=EMConfig(max_iter=2))


def test_free_parameters():
    assert free_parameters(1, 1) == 1
    assert free_parameters(2, 3) == 7
    assert free_parameters(145, 784) == 113824


def test_aic_score():
    assert aic_score(0.0, 0) == 0.0
    assert aic_score(-100.0, 10) == -220.0
    assert aic_score(-100.0, 10) > aic_score(-100.0, 11)
    assert aic_score(-99.0, 10) > aic_score(-100.0, 10)
    with pytest.raises(ValueError):
        aic_score(0.0, -1)


def test_loglik_base_conversion():
    assert loglik_in_base(-math.log(1000.0), 10) == pytest.approx(-3.0)
    assert loglik_in_base(-2.5, None) == -2.5


def test_select_k_single_k():
    X = np.random.default_rng(0).integers(0, 2, size=(20, 5))
    report = select_k(X, [1], [0, 1])
    assert report.best_k == 1
    assert len(report.entries) == 2
    for e in report.entries:
        assert e.aic_score == 2 * e.loglik - 2 * e.eta


def test_select_k_natural_log_entries():
    X = np.random.default_rng(0).integers(0, 2, size=(20, 5))
    report = select_k(X, [1, 2], [0], log_base=None)
    fit = report.fits[(1, 0)]
    assert report.entries[0].loglik == fit.loglik


def test_model_serialization_round_trip():
    rng = np.random.default_rng(2)
    model = random_model(rng, 3, 7)
    data = serialize_model(model)
    assert data[:4] == b"BMIX"
    back = parse_model(data)
    assert back.pi.tobytes() == model.pi.tobytes()
    assert back.p.tobytes() == model.p.tobytes()
    with pytest.raises(BadModelFile):
        parse_model(data[:-8])
    with pytest.raises(BadModelFile):
        parse_model(b"XXXX" + data[4:])


def test_select_k_best_resists_one_stuck_restart():
    # seed 5 at K=3 lands in an optimum with two true clusters merged
    rng = np.random.default_rng(101)
    p = np.where(rng.random((3, 20)) < 0.5, 0.1, 0.9)
    z = rng.integers(0, 3, 600)
    X = (rng.random((600, 20)) < p[z]).astype(float)
    best = select_k(X, range(2, 6), range(10), keep_fits=False)
    assert best.best_k == 3 and best.selection == "best"
    mean = select_k(X, range(2, 6), range(10), selection="mean", keep_fits=False)
    assert mean.best_k == 4
