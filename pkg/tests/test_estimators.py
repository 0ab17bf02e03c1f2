import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustcov.estimators import (
    ConditionalMoments, DegenerateRankWarning, EstimatorConfig, ShapeEstimate, e_step, estimate,
    fixed_point_step, impute_baselines, initial_sigma, low_rank_project, m_step_gauss, m_step_tyl,
    normalize_shape, observed_loglik, run_em, scm, tyler, tyler_textures,
)
from robustcov.estimators import EStep, _Group
from robustcov.exceptions import ConditioningError, ConfigurationError, ConvergenceError, NearSingularError
from robustcov.linalg import geodesic_distance_sq, is_spd
from robustcov.missing import IncompleteMatrix, PatternSpec, apply_pattern, build_plans
from robustcov.simulate import make_rng, sample_msg, toeplitz_scatter

from conftest import random_spd


def _mcar(rng, y, ratio):
    p, n = y.shape
    mask = rng.random((p, n)) > ratio
    mask[rng.integers(p, size=n), np.arange(n)] = True
    return IncompleteMatrix(y, mask)


def direct_tyler_step(y, sigma):
    p, n = y.shape
    inv = np.linalg.inv(sigma)
    out = np.zeros((p, p))
    for i in range(n):
        out += np.outer(y[:, i], y[:, i]) / (y[:, i] @ inv @ y[:, i])
    out *= p / n
    return out * p / np.trace(out)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def test_estep_identity_sigma(rng):
    y = rng.standard_normal((4, 6))
    mask = np.ones((4, 6), bool)
    mask[[1, 3], 2] = False
    mask[0, 5] = False
    tau = rng.uniform(0.5, 2.0, 6)
    est = e_step(IncompleteMatrix(y, mask), np.eye(4), tau)
    for i in (2, 5):
        mom = est.moments(i)
        np.testing.assert_allclose(mom.mu_m_given_o, 0.0)
        m = np.flatnonzero(~mask[:, i])
        np.testing.assert_allclose(mom.C[np.ix_(m, m)], tau[i] * np.eye(m.size))


def test_estep_complete_sample_shortcut(rng):
    y = rng.standard_normal((3, 4))
    mask = np.ones((3, 4), bool)
    mask[0, 1] = False
    est = e_step(IncompleteMatrix(y, mask), random_spd(rng, 3), np.ones(4))
    mom = est.moments(0)
    np.testing.assert_array_equal(mom.C, np.outer(y[:, 0], y[:, 0]))
    np.testing.assert_array_equal(mom.B, mom.C)


def test_estep_block_structure(rng):
    p = 5
    sigma = random_spd(rng, p)
    y = rng.standard_normal((p, 3))
    mask = np.ones((p, 3), bool)
    mask[[0, 3], 1] = False
    data = IncompleteMatrix(y, mask)
    est = e_step(data, sigma, np.array([1.0, 1.7, 1.0]))
    mom = est.moments(1)
    plan = build_plans(data)[1]
    yo = y[plan.obs_idx, 1]
    # top-left block of B is y_o y_o^T exactly
    np.testing.assert_array_equal(mom.B[:3, :3], np.outer(yo, yo))
    pm = plan.matrix()
    np.testing.assert_allclose(mom.C, pm.T @ mom.B @ pm, atol=1e-14)
    assert np.all(np.linalg.eigvalsh(mom.B) > -1e-12)
    # closed form against explicit block algebra
    so, mi = plan.obs_idx, plan.mis_idx
    mu = sigma[np.ix_(mi, so)] @ np.linalg.solve(sigma[np.ix_(so, so)], yo)
    np.testing.assert_allclose(mom.mu_m_given_o, mu, rtol=1e-12)
    schur = sigma[np.ix_(mi, mi)] - sigma[np.ix_(mi, so)] @ np.linalg.solve(sigma[np.ix_(so, so)], sigma[np.ix_(so, mi)])
    np.testing.assert_allclose(mom.B[3:, 3:], 1.7 * schur + np.outer(mu, mu), rtol=1e-12)
    np.testing.assert_allclose(mom.B[3:, :3], np.outer(mu, yo), rtol=1e-12)


def test_estep_conditional_monte_carlo():
    """Moments against draws from the joint law conditioned through a Cholesky factor."""
    rng = np.random.default_rng(7)
    p = 3
    sigma = random_spd(rng, p)
    tau = 1.6
    y = rng.standard_normal(p)
    mask = np.array([True, False, True])
    est = e_step(IncompleteMatrix(y[:, None], mask[:, None]), sigma, np.array([tau]))
    order = np.r_[np.flatnonzero(mask), np.flatnonzero(~mask)]
    low = np.linalg.cholesky(tau * sigma[np.ix_(order, order)])
    z_o = np.linalg.solve(low[:2, :2], y[mask])
    n = 10 ** 6
    draws = low[2:, :2] @ z_o + low[2:, 2:] @ rng.standard_normal((1, n))
    mom = est.moments(0)
    mean = draws.mean()
    se = draws.std() / np.sqrt(n)
    assert abs(mom.mu_m_given_o[0] - mean) < 3 * se
    second = draws[0] ** 2
    assert abs(mom.C[1, 1] - second.mean()) < 3 * second.std() / np.sqrt(n)
    assert abs(mom.C[1, 1] - second.mean()) / second.mean() < 0.01


def test_estep_conditioning_error():
    sigma = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    y = np.ones((3, 1))
    mask = np.array([[True], [True], [False]])
    with pytest.raises(ConditioningError) as info:
        e_step(IncompleteMatrix(y, mask), sigma, np.ones(1))
    assert info.value.sample == 0


def test_estep_weighted_sum_matches_moments(rng):
    p, n = 4, 9
    y = rng.standard_normal((p, n))
    data = _mcar(rng, y, 0.3)
    sigma = random_spd(rng, p)
    tau = rng.uniform(0.5, 2, n)
    est = e_step(data, sigma, tau)
    w = rng.uniform(0, 1, n)
    explicit = sum(w[i] * est.moments(i).C for i in range(n))
    np.testing.assert_allclose(est.weighted_sum(w), explicit, rtol=1e-12)
    inv = np.linalg.inv(sigma)
    q = [np.trace(est.moments(i).C @ inv) for i in range(n)]
    np.testing.assert_allclose(est.quad_forms(inv), q, rtol=1e-10)
    assert isinstance(est.moments(0), ConditionalMoments)


# ---------------------------------------------------------------------------
# M-steps
# ---------------------------------------------------------------------------

def test_textures_one_when_statistics_equal_shape(rng):
    p, n = 4, 5
    sigma, _ = normalize_shape(random_spd(rng, p))
    est = EStep(np.zeros((p, n)), np.ones(n), [_Group(np.arange(n), np.zeros(0, int), np.arange(p), sigma)])
    new, tau = m_step_tyl(est, sigma, EstimatorConfig())
    np.testing.assert_allclose(tau, 1.0, rtol=1e-12)
    np.testing.assert_allclose(new, sigma, rtol=1e-12)


def test_single_fixed_point_step_is_tyler_step(rng):
    y, _ = sample_msg(toeplitz_scatter(5, 0.5), 40, 1.0, rng)
    s0 = normalize_shape(scm(y))[0]
    est = e_step(IncompleteMatrix.complete(y), s0, np.ones(40))
    new, _ = m_step_tyl(est, s0, EstimatorConfig(fp_iters_per_em=1))
    np.testing.assert_allclose(new, direct_tyler_step(y, s0), rtol=1e-12)


def test_fixed_point_plug_back(rng):
    y, _ = sample_msg(toeplitz_scatter(5, 0.5), 80, 1.0, rng)
    data = _mcar(rng, y, 0.2)
    est = e_step(data, np.eye(5), np.ones(80))
    cfg = EstimatorConfig(fp_inner_loop=True, fp_tol=1e-20, fp_max_iter=2000)
    sigma, _ = m_step_tyl(est, np.eye(5), cfg)
    h = normalize_shape(fixed_point_step(est, sigma))[0]
    assert np.max(np.abs(h - sigma)) < 1e-6


def test_gauss_mstep_complete_is_scm(rng):
    y = rng.standard_normal((4, 30))
    est = e_step(IncompleteMatrix.complete(y), np.eye(4), np.ones(30))
    np.testing.assert_allclose(m_step_gauss(est), scm(y), rtol=1e-12, atol=1e-14)
    one = rng.standard_normal((3, 1))
    est = e_step(IncompleteMatrix.complete(one), np.eye(3), np.ones(1))
    np.testing.assert_allclose(m_step_gauss(est), one @ one.T)
    assert not is_spd(m_step_gauss(est))


def test_em_scm_consistency_mcar():
    rng = np.random.default_rng(3)
    cov = random_spd(rng, 5)
    y, _ = sample_msg(cov, 20000, textures=1.0, seed=rng)
    est = run_em(_mcar(rng, y, 0.2), EstimatorConfig(kind="em_scm"))
    assert np.linalg.norm(est.sigma - cov) / np.linalg.norm(cov) < 0.05


# ---------------------------------------------------------------------------
# Low-rank projection
# ---------------------------------------------------------------------------

def test_low_rank_arithmetic(rng):
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    s = (q * [5.0, 3.0, 1.0, 1.0]) @ q.T
    out = low_rank_project(s, 2)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(out))[::-1], [5, 3, 1, 1], atol=1e-12)
    np.testing.assert_allclose(out, s, atol=1e-12)
    np.testing.assert_allclose(low_rank_project(np.diag([2.0, 1.0]), 1), np.diag([2.0, 1.0]))


def test_low_rank_trailing_eigenvalues(rng):
    s = random_spd(rng, 6)
    vals = np.sort(np.linalg.eigvalsh(s))[::-1]
    out_vals = np.sort(np.linalg.eigvalsh(low_rank_project(s, 2)))[::-1]
    np.testing.assert_allclose(out_vals[:2], vals[:2], rtol=1e-12)
    np.testing.assert_allclose(out_vals[2:], vals[2:].mean(), rtol=1e-12)


def test_low_rank_idempotent(rng):
    s = random_spd(rng, 7)
    once = low_rank_project(s, 3)
    np.testing.assert_allclose(low_rank_project(once, 3), once, atol=1e-12)


def test_low_rank_degenerate_warns():
    with pytest.warns(DegenerateRankWarning):
        out = low_rank_project(2.0 * np.eye(3), 1)
    assert is_spd(out)
    with pytest.raises(ConfigurationError):
        low_rank_project(np.eye(3), 3)


def test_low_rank_grid_search_3x3():
    """The projection beats every s2 I + lam u u^T on a fine grid (r=1, p=3)."""
    rng = np.random.default_rng(11)
    s = random_spd(rng, 3, cond=20)
    proj = low_rank_project(s, 1)
    best = np.inf
    vals = np.linalg.eigvalsh(s)
    s2_grid = np.linspace(0.2 * vals[0], vals[-1], 60)
    for th, ph in itertools.product(np.linspace(0, np.pi, 61), np.linspace(0, 2 * np.pi, 121)):
        u = np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
        for s2 in s2_grid:
            # optimal lam >= 0 for fixed (u, s2)
            lam = max(u @ s @ u - s2, 0.0)
            best = min(best, np.linalg.norm(s - s2 * np.eye(3) - lam * np.outer(u, u)))
    assert np.linalg.norm(s - proj) <= best + 1e-12


# ---------------------------------------------------------------------------
# Complete-data estimators
# ---------------------------------------------------------------------------

def test_scm_one_hot():
    y = np.kron(np.eye(3), np.ones((1, 4)))
    np.testing.assert_allclose(scm(y), np.eye(3) * 4 / 12)


def test_tyler_scale_invariant_and_fixed_point(rng):
    y, _ = sample_msg(toeplitz_scatter(6, 0.6), 100, 1.0, rng)
    s = tyler(y, tol=1e-12)
    np.testing.assert_allclose(tyler(7.5 * y, tol=1e-12), s, rtol=1e-10)
    np.testing.assert_allclose(direct_tyler_step(y, s), s, atol=1e-10)
    assert np.trace(s) == pytest.approx(6)
    sd = tyler(y, tol=1e-12, normalization="determinant")
    assert np.linalg.det(sd) == pytest.approx(1.0)
    np.testing.assert_allclose(normalize_shape(sd)[0], s, rtol=1e-8)


def test_tyler_errors(rng):
    with pytest.raises(NearSingularError):
        tyler(rng.standard_normal((5, 5)))
    with pytest.raises(ConvergenceError):
        tyler(rng.standard_normal((5, 50)) * rng.exponential(size=50), tol=1e-300, max_iter=3)


def test_tyler_beats_scm_heavy_tails():
    truth = normalize_shape(toeplitz_scatter(15, 0.7))[0]
    et, es = [], []
    for rep in range(30):
        y, _ = sample_msg(truth, 500, 0.5, make_rng(rep))
        et.append(geodesic_distance_sq(truth, tyler(y)))
        es.append(geodesic_distance_sq(truth, normalize_shape(scm(y))[0]))
    assert np.mean(et) < np.mean(es)


def test_tyler_textures(rng):
    y = rng.standard_normal((3, 4))
    np.testing.assert_allclose(tyler_textures(y, np.eye(3)), np.sum(y ** 2, axis=0) / 3)


# ---------------------------------------------------------------------------
# EM driver
# ---------------------------------------------------------------------------

def test_em_scm_complete_is_scm_after_one_iteration(rng):
    y = rng.standard_normal((5, 60))
    data = IncompleteMatrix.complete(y)
    one = run_em(data, EstimatorConfig(kind="em_scm", em_max_iter=1))
    np.testing.assert_allclose(one.sigma, scm(y), rtol=1e-12)
    full = run_em(data, EstimatorConfig(kind="em_scm"))
    assert full.converged
    np.testing.assert_allclose(full.sigma, scm(y), rtol=1e-12)
    np.testing.assert_array_equal(full.textures, 1.0)


def test_em_tyl_matches_em_scm_on_gaussian_data():
    rng = make_rng(21)
    cov = toeplitz_scatter(15, 0.7)
    y, _ = sample_msg(cov, 1000, textures=1.0, seed=rng)
    data = apply_pattern(y, PatternSpec("general", 0.05), rng)
    a = run_em(data, EstimatorConfig(kind="em_tyl")).sigma
    b = normalize_shape(run_em(data, EstimatorConfig(kind="em_scm")).sigma)[0]
    assert geodesic_distance_sq(a, b) < 0.1


def test_em_result_fields(rng):
    y, _ = sample_msg(toeplitz_scatter(5, 0.5), 60, 1.0, rng)
    est = run_em(_mcar(rng, y, 0.2), EstimatorConfig(kind="em_tyl", rank=2))
    assert isinstance(est, ShapeEstimate) and est.name == "em_tyl_r"
    assert est.converged and est.iterations == len(est.trace)
    assert est.trace[-1] < 1e-6
    assert np.all(est.textures > 0)
    assert np.trace(est.sigma) == pytest.approx(5)
    vals = np.sort(np.linalg.eigvalsh(est.sigma))[::-1]
    np.testing.assert_allclose(vals[2:], vals[2:].mean(), rtol=1e-8)


def test_em_nonconvergence_flagged(rng):
    y, _ = sample_msg(toeplitz_scatter(5, 0.5), 60, 1.0, rng)
    est = run_em(_mcar(rng, y, 0.3), EstimatorConfig(kind="em_tyl", em_max_iter=2, em_tol=1e-300))
    assert not est.converged and est.iterations == 2


def test_initial_sigma_fallbacks(rng):
    y = rng.standard_normal((4, 30))
    assert initial_sigma(IncompleteMatrix.complete(y))[1] == "tyl_obs"
    mask = np.ones((4, 30), bool)
    mask[0, 3:] = False
    assert initial_sigma(IncompleteMatrix(y, mask))[1] == "identity"


def test_em_rejects_bad_rank(rng):
    data = IncompleteMatrix.complete(rng.standard_normal((4, 30)))
    with pytest.raises(ConfigurationError):
        run_em(data, EstimatorConfig(rank=4))


def test_loglik_marginalizes(rng):
    sigma = random_spd(rng, 3)
    y = rng.standard_normal((3, 1))
    mask = np.array([[True], [False], [True]])
    o = [0, 2]
    s = sigma[np.ix_(o, o)]
    yo = y[o, 0]
    expected = -np.log(np.linalg.det(2.0 * s)) - yo @ np.linalg.solve(2.0 * s, yo)
    assert observed_loglik(IncompleteMatrix(y, mask), sigma, np.array([2.0])) == pytest.approx(expected)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), kind=st.sampled_from(["em_scm", "em_tyl"]))
def test_em_loglik_monotone(seed, kind):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(2, 7))
    n = int(rng.integers(p + 2, 5 * p))
    y, _ = sample_msg(random_spd(rng, p, 20), n, 1.0, rng)
    data = _mcar(rng, y, 0.25)
    cfg = EstimatorConfig(kind=kind)
    sigma, tau = initial_sigma(data, cfg)[0], np.ones(n)
    prev = observed_loglik(data, sigma, tau)
    for _ in range(10):
        est = e_step(data, sigma, tau)
        if kind == "em_scm":
            sigma = m_step_gauss(est)
        else:
            sigma, tau = m_step_tyl(est, sigma, cfg)
        cur = observed_loglik(data, sigma, tau)
        assert cur >= prev - 1e-9
        prev = cur


# ---------------------------------------------------------------------------
# Baselines and registry
# ---------------------------------------------------------------------------

def test_imputation_baselines_complete_data(rng):
    y, _ = sample_msg(toeplitz_scatter(5, 0.5), 80, 1.0, rng)
    data = IncompleteMatrix.complete(y)
    ref = tyler(y)
    for kind in ("rmi", "rsi", "mean_tyl"):
        np.testing.assert_allclose(impute_baselines(data, EstimatorConfig(kind=kind), rng).sigma, ref, rtol=1e-12)


def test_rmi_q1_is_rsi(rng):
    y, _ = sample_msg(toeplitz_scatter(5, 0.5), 80, 1.0, rng)
    data = _mcar(rng, y, 0.2)
    a = impute_baselines(data, EstimatorConfig(kind="rmi", q_imputations=1), make_rng(5)).sigma
    b = impute_baselines(data, EstimatorConfig(kind="rsi"), make_rng(5)).sigma
    np.testing.assert_array_equal(a, b)


def test_rmi_average_then_project(rng):
    y, _ = sample_msg(toeplitz_scatter(6, 0.5), 80, 1.0, rng)
    data = _mcar(rng, y, 0.2)
    full = impute_baselines(data, EstimatorConfig(kind="rmi", q_imputations=3), make_rng(1)).sigma
    low = impute_baselines(data, EstimatorConfig(kind="rmi", q_imputations=3, rank=2), make_rng(1)).sigma
    np.testing.assert_allclose(low, normalize_shape(low_rank_project(full, 2))[0], rtol=1e-12)


def test_sparse_samples_warn(rng):
    y = rng.standard_normal((4, 30))
    mask = np.ones((4, 30), bool)
    mask[1:, 0] = False
    with pytest.warns(RuntimeWarning):
        impute_baselines(IncompleteMatrix(y, mask), EstimatorConfig(kind="rsi"), rng)


def test_registry(rng):
    y, _ = sample_msg(toeplitz_scatter(6, 0.5), 120, 1.0, rng)
    data = _mcar(rng, y, 0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRankWarning)
        for name in ("em_tyl", "em_scm", "tyl_clair", "scm_clair", "tyl_obs", "scm_obs", "rmi", "rsi", "mean_tyl",
                     "em_tyl_r", "em_scm_r", "tyl_clair_r", "rmi_r"):
            est = estimate(name, data, clairvoyant=y, rank=2, rng=make_rng(0))
            assert is_spd(est.sigma), name
    np.testing.assert_array_equal(estimate("scm_clair", data, clairvoyant=y).sigma, scm(y))
    with pytest.raises(ConfigurationError):
        estimate("em_tyl_r", data)
    with pytest.raises(ConfigurationError):
        estimate("tyl_clair", data)
    with pytest.raises(ConfigurationError):
        estimate("median", data)
