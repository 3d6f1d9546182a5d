import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from warrantysem.data import Claim, FieldDataset
from warrantysem.distributions import (EXPONENTIAL, WEIBULL, IndependentPair, JointModel,
                                       fit_univariate)
from warrantysem.errors import DomainError, NotPositiveDefiniteError
from warrantysem.information import (InfoMatrix, complete_neg_hessian, complete_score,
                                     fd_steps, louis_information, normal_quantile,
                                     wald_intervals)
from warrantysem.sem import Completed
from warrantysem.simulation import generate_batch

EXP_EXP = IndependentPair(EXPONENTIAL, EXPONENTIAL)
EXP_WEI = IndependentPair(EXPONENTIAL, WEIBULL)


def test_exponential_score_and_hessian_match_analytic():
    rng = np.random.default_rng(0)
    worst_s = 0.0
    err_b = []
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        lam = np.exp(rng.uniform(-3, 2, 2))
        # data generated within a factor 2 of the evaluation point
        x = rng.exponential(rng.uniform(0.5, 2) / lam[0], n)
        t = rng.exponential(rng.uniform(0.5, 2) / lam[1], n)
        c = Completed(x, t)
        s = complete_score(lam, c, EXP_EXP)
        b = complete_neg_hessian(lam, c, EXP_EXP)
        s_ref = np.array([n / lam[0] - x.sum(), n / lam[1] - t.sum()])
        b_ref = np.diag(n / lam ** 2)
        # relative to the size of the terms being differenced
        scale = np.array([n / lam[0] + x.sum(), n / lam[1] + t.sum()])
        worst_s = max(worst_s, np.max(np.abs(s - s_ref) / scale))
        err_b.append(np.max(np.abs(b - b_ref)) / np.max(b_ref))
    assert worst_s < 1e-6
    # a second difference at relative step 1e-5 carries rounding of roughly
    # eps / (4e-10) ~ 5e-7 per log-density term, so a few tiny datasets sit
    # just above 1e-6; the bulk must be well inside it
    assert np.quantile(err_b, 0.99) < 1e-6
    assert np.median(err_b) < 1e-7
    assert max(err_b) < 5e-6


def test_score_step_halving_agrees():
    rng = np.random.default_rng(1)
    for _ in range(50):
        theta = np.array([rng.uniform(0.1, 2), rng.uniform(1, 10), rng.uniform(0.5, 4)])
        c = Completed(rng.exponential(2.0, 100), 5 * rng.weibull(2.0, 100))
        h = fd_steps(theta, EXP_WEI)
        s1 = complete_score(theta, c, EXP_WEI, h)
        s2 = complete_score(theta, c, EXP_WEI, h / 2)
        assert np.max(np.abs(s1 - s2)) / max(1.0, np.max(np.abs(s1))) < 1e-5


def test_score_vanishes_at_complete_data_mle():
    rng = np.random.default_rng(2)
    x = rng.exponential(2.0, 500)
    t = 5 * rng.weibull(2.0, 500)
    theta = np.concatenate([fit_univariate(EXPONENTIAL, x).as_array(),
                            fit_univariate(WEIBULL, t).as_array()])
    s = complete_score(theta, Completed(x, t), EXP_WEI)
    assert np.max(np.abs(s) * np.maximum(1, theta)) / 500 < 1e-4


def test_hessian_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(20):
        theta = np.array([rng.uniform(0.1, 2), rng.uniform(1, 10), rng.uniform(0.5, 4)])
        c = Completed(rng.exponential(2.0, 80), 5 * rng.weibull(2.0, 80))
        b = complete_neg_hessian(theta, c, EXP_WEI)
        assert np.max(np.abs(b - b.T)) < 1e-8


def test_weibull_hessian_positive_definite_at_mle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        t = rng.uniform(1, 20) * rng.weibull(rng.uniform(0.5, 4), 200)
        x = rng.exponential(2.0, 200)
        theta = np.concatenate([fit_univariate(EXPONENTIAL, x).as_array(),
                                fit_univariate(WEIBULL, t).as_array()])
        b = complete_neg_hessian(theta, Completed(x, t), EXP_WEI)
        assert np.linalg.eigvalsh(b)[0] > 0


def test_fd_steps_shrink_near_boundary():
    theta = np.array([1e-6, 1.0])
    h = fd_steps(theta, EXP_EXP)
    assert h[0] < 0.5e-6 and h[1] == 1e-5
    with pytest.raises(DomainError, match="halvings"):
        fd_steps(np.array([1e-9, 1.0]), EXP_EXP)


def _complete_dataset(n=150, seed=5):
    rng = np.random.default_rng(seed)
    x = rng.exponential(1 / 0.7, n)
    t = 5 * rng.weibull(2.0, n)
    return FieldDataset(tau=math.inf, records=[Claim(a, b) for a, b in zip(x, t)]), x, t


def test_zero_missing_reduces_to_hessian():
    d, x, t = _complete_dataset()
    theta = np.array([0.7, 5.0, 2.0])
    b = complete_neg_hessian(theta, Completed(x, t), EXP_WEI)
    for m in (1, 7, 1200):
        info = louis_information(theta, d, EXP_WEI, m, 3)
        assert np.max(np.abs(info.matrix - b)) <= 1e-8 * np.max(np.abs(b))


def test_zero_missing_se_matches_exponential_analytic():
    d, x, t = _complete_dataset(n=400, seed=6)
    lam = np.array([1 / x.mean(), 1 / t.mean()])
    info = louis_information(lam, d, EXP_EXP, 10, 1)
    table = wald_intervals(lam, info)
    assert_allclose([r.se for r in table], lam / math.sqrt(400), rtol=1e-5)


@pytest.fixture(scope="module")
def high_missing_batch():
    truth = JointModel.build(EXP_EXP, [0.2, 0.2])
    return truth, generate_batch(truth, 100, 5.0, 6.0, 17)


def test_louis_deterministic_and_symmetric(high_missing_batch):
    truth, d = high_missing_batch
    a = louis_information(truth.theta, d, EXP_EXP, 700, 42)
    b = louis_information(truth.theta, d, EXP_EXP, 700, np.random.default_rng(0))
    c = louis_information(truth.theta, d, EXP_EXP, 700, 42)
    assert np.array_equal(a.matrix, c.matrix)
    assert not np.array_equal(a.matrix, b.matrix)
    assert np.max(np.abs(a.matrix - a.matrix.T)) < 1e-8
    assert a.positive_definite and np.linalg.eigvalsh(a.matrix)[0] > 0
    assert a.imputations == 700


def test_louis_chunking_does_not_change_result(high_missing_batch):
    truth, d = high_missing_batch
    a = louis_information(truth.theta, d, EXP_EXP, 900, 5, chunk=300)
    b = louis_information(truth.theta, d, EXP_EXP, 900, 5, chunk=300)
    assert np.array_equal(a.matrix, b.matrix)


def test_louis_monte_carlo_convergence(high_missing_batch):
    truth, d = high_missing_batch
    big = louis_information(truth.theta, d, EXP_EXP, 100_000, 1).matrix
    small = np.array([louis_information(truth.theta, d, EXP_EXP, 1000, 100 + i).matrix
                      for i in range(50)])
    assert np.all(big >= small.min(axis=0)) and np.all(big <= small.max(axis=0))
    # missing information makes the observed information smaller than the complete one
    one = louis_information(truth.theta, d, EXP_EXP, 1, 9).matrix
    assert one.shape == (2, 2)


def test_wald_scalar():
    table = wald_intervals([3.0], InfoMatrix(np.array([[25.0]]), 1, ("rate",), True))
    row = table["rate"]
    assert_allclose(row.se, 0.2, rtol=1e-15)
    assert_allclose(row.upper - row.lower, 2 * normal_quantile(0.95) * 0.2, rtol=1e-14)
    assert row.lower < row.estimate < row.upper


def test_normal_quantile():
    assert round(normal_quantile(0.95), 6) == 1.959964
    assert_allclose(normal_quantile(0.6826894921370859), 1.0, rtol=1e-12)
    with pytest.raises(DomainError):
        normal_quantile(1.0)


def test_non_pd_information_is_refused():
    info = InfoMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]), 10, ("a", "b"), False)
    with pytest.raises(NotPositiveDefiniteError, match="imputations"):
        wald_intervals([1.0, 1.0], info)


def test_ci_csv(tmp_path):
    table = wald_intervals([3.0], InfoMatrix(np.array([[25.0]]), 1, ("rate",), True))
    table.write_csv(tmp_path / "ci.csv")
    lines = (tmp_path / "ci.csv").read_text().splitlines()
    assert lines[0] == "param,estimate,se,lower,upper,level"
    assert lines[1].startswith("rate,3,0.2")
