import numpy as np
import pytest

from areal_ssm.effbs import GaussianObservation, StateBelief, forward_filter
from areal_ssm.errors import ConfigurationError, ParameterDomainError
from areal_ssm.model_spec import Family, HyperParams, SpecId, SystemMatrices, assemble_system
from areal_ssm.simulate import (
    SimConfig,
    dense_joint_oracle,
    joint_precision,
    simulate_dataset,
    simulate_gaussian,
    simulate_latent,
)
from areal_ssm.spatial_graph import RegionGraph, build_neighborhood_matrix


def _cfg(spec, hyper, seed=0, T=5, S=3, init_mean=-4.0):
    g = RegionGraph.path(S)
    p = {Family.III: 2 * S}.get(spec.family, S + 1 if spec.family.has_psi else S)
    mean = np.zeros(p)
    mean[:S] = init_mean
    return SimConfig(spec, hyper, g, np.full((T, S), 1000.0), StateBelief(mean, 0.01 * np.eye(p)), seed=seed)


def test_same_seed_same_output():
    cfg = _cfg(SpecId(Family.V), HyperParams((10.0,), (0.5,), 0.2, 100.0), seed=4)
    (o1, b1), (o2, b2) = simulate_dataset(cfg), simulate_dataset(cfg)
    np.testing.assert_array_equal(o1.y, o2.y)
    np.testing.assert_array_equal(b1, b2)
    o3, _ = simulate_dataset(_cfg(SpecId(Family.V), HyperParams((10.0,), (0.5,), 0.2, 100.0), seed=5))
    assert not np.array_equal(o1.y, o3.y)


def test_poisson_mean_without_noise():
    # no initial spread and no evolution noise: every y_ts is Poisson(n e^theta)
    theta = np.log(0.003)
    g = RegionGraph.path(2)
    cfg = SimConfig(SpecId(Family.I), HyperParams((1.0,)), g, np.full((100_000, 2), 1000.0),
                    StateBelief(np.full(2, theta), np.zeros((2, 2))), seed=1, zero_innovations=True)
    obs, beta = simulate_dataset(cfg)
    np.testing.assert_array_equal(beta, theta)
    assert obs.y.mean() == pytest.approx(3.0, rel=0.01)


def test_zero_kappa_matches_order1():
    a, ba = simulate_dataset(_cfg(SpecId(Family.II), HyperParams((5.0,), (0.5,), 0.0), seed=2))
    b, bb = simulate_dataset(_cfg(SpecId(Family.I), HyperParams((5.0,), (0.5,)), seed=2))
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(ba, bb)


def test_runaway_log_risk_rejected():
    cfg = _cfg(SpecId(Family.I), HyperParams((1.0,)), init_mean=49.9, T=20)
    with pytest.raises(ParameterDomainError):
        simulate_dataset(cfg)


def test_innovation_covariance(path3):
    # differences of the simulated path are draws from the PGMRF
    spec = SpecId(Family.I)
    h = HyperParams((2.0,), (1.0,))
    beta, sys = simulate_latent(spec, h, path3, StateBelief(np.zeros(3), np.eye(3)), 50_000,
                                np.random.default_rng(0))
    d = np.diff(beta, axis=0)
    assert np.abs(np.cov(d.T) - np.linalg.inv(sys.W_inv)).max() < 0.01


def test_oracle_without_observations(path3):
    M = build_neighborhood_matrix(path3)
    spec = SpecId(Family.II)
    sys = assemble_system(spec, HyperParams((2.0,), (0.5,), 0.4), path3, M)
    m0 = np.array([1.0, -2.0, 0.5])
    mu, _ = dense_joint_oracle(sys, StateBelief(m0, np.eye(3)), None, T=4)
    for t in range(5):
        np.testing.assert_allclose(mu[t], np.linalg.matrix_power(sys.G, t) @ m0, atol=1e-10)


def test_oracle_scalar_case():
    sys = SystemMatrices(np.eye(1), np.eye(1), np.eye(1))
    obs = GaussianObservation([[1.0]], [[1.0]])
    mu, cov = dense_joint_oracle(sys, StateBelief([0.0], [[1.0]]), obs)
    assert mu[1, 0] == pytest.approx(2 / 3) and cov[1, 0, 0] == pytest.approx(2 / 3)


def _rts_smoother(filt, sys):
    T = filt.T
    ms, Cs = filt.m.copy(), filt.C.copy()
    for t in range(T - 1, -1, -1):
        J = filt.C[t] @ sys.G.T @ np.linalg.inv(filt.R[t + 1])
        ms[t] = filt.m[t] + J @ (ms[t + 1] - filt.a[t + 1])
        Cs[t] = filt.C[t] + J @ (Cs[t + 1] - filt.R[t + 1]) @ J.T
    return ms, Cs


@pytest.mark.parametrize("fam", list(Family))
def test_oracle_matches_filter_and_smoother(fam):
    rng = np.random.default_rng(20 + list(Family).index(fam))
    g = RegionGraph.lattice(1, 3)
    spec = SpecId(fam)
    tau = (1.5, 4.0) if fam is Family.III else (1.5,)
    h = HyperParams(tau, (0.8,) * len(tau), 0.6 if fam.has_kappa else None, 5.0 if fam.has_psi else None)
    sys = assemble_system(spec, h, g, build_neighborhood_matrix(g))
    A = rng.standard_normal((sys.p, sys.p))
    init = StateBelief(rng.standard_normal(sys.p), A @ A.T + np.eye(sys.p))
    beta, _ = simulate_latent(spec, h, g, init, 4, rng)
    obs = simulate_gaussian(sys, beta, rng.uniform(0.5, 2.0, size=(4, 3)), rng)
    ms, Cs = _rts_smoother(forward_filter(obs, sys, init), sys)
    mu, cov = dense_joint_oracle(sys, init, obs)
    np.testing.assert_allclose(mu, ms, atol=1e-8)
    np.testing.assert_allclose(cov, Cs, atol=1e-8)


def test_joint_precision_is_symmetric_positive(path3):
    sys = assemble_system(SpecId(Family.I), HyperParams((1.0,), (0.5,)), path3, build_neighborhood_matrix(path3))
    Q, h = joint_precision(sys, StateBelief(np.zeros(3), np.eye(3)), GaussianObservation(np.ones((2, 3)), 1.0))
    assert Q.shape == (9, 9) and h.shape == (9,)
    np.testing.assert_array_equal(Q, Q.T)
    assert np.linalg.eigvalsh(Q).min() > 0


def test_oracle_size_guard():
    g = RegionGraph.path(20)
    sys = assemble_system(SpecId(Family.I), HyperParams((1.0,)), g, build_neighborhood_matrix(g))
    with pytest.raises(ConfigurationError):
        dense_joint_oracle(sys, StateBelief(np.zeros(20), np.eye(20)), None, T=10)
