import numpy as np
import pytest
from scipy.special import logsumexp

from areal_ssm.effbs import poisson_log_lik
from areal_ssm.errors import ConfigurationError
from areal_ssm.mcmc import ChainConfig, PriorConfig
from areal_ssm.model_compare import (
    _log_mean,
    bayes_factor_matrix,
    compare_models,
    joint_log_predictive,
    one_step_predictive,
    predictive_at,
    propagate,
)
from areal_ssm.model_spec import Family, HyperParams, SpecId, assemble_system
from areal_ssm.simulate import SimConfig, simulate_dataset
from areal_ssm.spatial_graph import RegionGraph, build_neighborhood_matrix

SPEC1 = SpecId(Family.I)
G1 = RegionGraph.from_edges(1, [])
TINY = ChainConfig(n_iter=40, burn_in=20, n_chains=2, seed=0)


def _data(T=5):
    g = RegionGraph.path(3)
    pri = PriorConfig(init_mean=np.log(1e-3), init_var=0.1)
    obs, _ = simulate_dataset(SimConfig(SPEC1, HyperParams((20.0,), (0.5,)), g, np.full((T, 3), 1e4),
                                        pri.init_state(SPEC1, 3), seed=3))
    return obs, g, pri


def test_single_draw_estimate():
    beta = np.array([[np.log(0.3)]])
    hyper = {"tau1": np.array([1e14]), "phi1": np.array([0.0])}
    est = one_step_predictive([2.0], [10.0], beta, hyper, SPEC1, G1, np.random.default_rng(0))
    assert est.n_draws == 1
    assert est.log_estimate == pytest.approx(poisson_log_lik([2.0], [10.0], [np.log(0.3)]), abs=1e-5)


def test_degenerate_posterior_zero_count():
    beta = np.full((500, 1), np.log(2.0))
    hyper = {"tau1": np.full(500, 1e14), "phi1": np.zeros(500)}
    est = one_step_predictive([0.0], [1.0], beta, hyper, SPEC1, G1, np.random.default_rng(0))
    assert est.log_estimate == pytest.approx(-2.0, abs=1e-5)


def test_log_mean_and_jackknife():
    ell = np.random.default_rng(0).normal(-5, 0.3, size=4000)
    est, se = _log_mean(ell)
    assert est == pytest.approx(logsumexp(ell) - np.log(ell.size))
    # delta method: sd(w) / (sqrt(G) mean(w))
    w = np.exp(ell)
    assert se == pytest.approx(w.std() / np.sqrt(w.size) / w.mean(), rel=0.05)


def test_propagate_moments(path3):
    M = build_neighborhood_matrix(path3)
    spec = SpecId(Family.V)
    h = HyperParams((3.0,), (0.7,), 0.4, 50.0)
    sys = assemble_system(spec, h, path3, M)
    prev = np.array([0.5, -1.0, 0.2, 0.1])
    n = 200_000
    hyper = {k: np.full(n, v) for k, v in h.as_dict(spec).items()}
    draws = propagate(np.tile(prev, (n, 1)), hyper, spec, path3, np.random.default_rng(1), M)
    np.testing.assert_allclose(draws.mean(0), sys.G @ prev, atol=0.01)
    assert np.abs(np.cov(draws.T) - sys.W).max() < 0.01


def test_propagate_order2(path3):
    M = build_neighborhood_matrix(path3)
    spec = SpecId(Family.III, "diagonal")
    h = HyperParams((1e12, 1e12))
    prev = np.arange(6.0)
    hyper = {k: np.full(3, v) for k, v in h.as_dict(spec).items()}
    out = propagate(np.tile(prev, (3, 1)), hyper, spec, path3, np.random.default_rng(0), M)
    np.testing.assert_allclose(out[0], np.r_[prev[:3] + prev[3:], prev[3:]], atol=1e-4)


def test_bayes_factor_matrix():
    B = bayes_factor_matrix([-100.0, -110.0])
    assert B[0, 1] == 10.0 and B[1, 0] == -10.0
    np.testing.assert_array_equal(np.diag(B), 0)
    with pytest.raises(ConfigurationError):
        bayes_factor_matrix([-1.0, -2.0], t_stars=[3, 4])


def test_one_term_joint_equals_single_call():
    obs, g, pri = _data()
    j = joint_log_predictive(obs, SPEC1, g, pri, TINY, t_star=4, seed=5)
    single = predictive_at(obs, 5, SPEC1, g, pri, TINY, seed=5)
    assert j.total == single.log_estimate
    assert j.t_values.tolist() == [5]


def test_joint_additivity():
    obs, g, pri = _data()
    full = joint_log_predictive(obs, SPEC1, g, pri, TINY, t_star=2, seed=1)
    a = joint_log_predictive(obs, SPEC1, g, pri, TINY, t_star=2, seed=1, t_end=3)
    b = joint_log_predictive(obs, SPEC1, g, pri, TINY, t_star=3, seed=1)
    assert full.total == pytest.approx(a.total + b.total, abs=1e-12)
    assert full.total == pytest.approx(full.log_pred.sum(), abs=1e-12)


def test_training_window_bounds():
    obs, g, pri = _data()
    for t_star in (0, 5):
        with pytest.raises(ConfigurationError):
            joint_log_predictive(obs, SPEC1, g, pri, TINY, t_star=t_star)


def test_identical_models_have_zero_log_bf():
    obs, g, pri = _data()
    rep = compare_models(obs, [SPEC1, SPEC1, SpecId(Family.II)], g, pri, TINY, t_star=3, seed=2)
    assert rep.log_bf[0, 1] == 0.0
    np.testing.assert_allclose(rep.log_bf, -rep.log_bf.T)
    np.testing.assert_allclose(rep.joint, rep.log_pred.sum(axis=1), atol=1e-12)
    assert rep.log_pred.shape == (3, 2)
