"""Forward simulation from the generative model, and a dense linear-Gaussian oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .effbs import DEFAULT_CLAMP, GaussianObservation, Observation, StateBelief
from .errors import ConfigurationError, ParameterDomainError, StructuralInputError
from .model_spec import HyperParams, SpecId, SystemMatrices, assemble_system, field_blocks
from .spatial_graph import (
    NeighborhoodMatrix,
    PgmrfParams,
    RegionGraph,
    build_neighborhood_matrix,
    pgmrf_sample,
)

ORACLE_MAX_DIM = 200
MAX_POISSON_MEAN = 1e15


@dataclass(frozen=True, eq=False)
class SimConfig:
    spec: SpecId
    hyper: HyperParams
    graph: RegionGraph
    n: np.ndarray
    init: StateBelief
    seed: int | np.random.SeedSequence = 0
    clamp: tuple[float, float] = DEFAULT_CLAMP
    # test seam: drop evolution noise entirely
    zero_innovations: bool = False

    @property
    def T(self) -> int:
        return np.asarray(self.n).shape[0]


def mvn_draw(mean, cov, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(mean, cov), allowing a singular (e.g. zero) covariance."""
    mean = np.asarray(mean, float)
    if not np.any(cov):
        return mean.copy()
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        lam, U = np.linalg.eigh(cov)
        L = U * np.sqrt(np.clip(lam, 0.0, None))
    return mean + L @ rng.standard_normal(mean.size)


def sample_innovation(spec: SpecId, hyper: HyperParams, M: NeighborhoodMatrix, p: int, rng) -> np.ndarray:
    """One evolution innovation, drawn block by block."""
    omega = np.zeros(p)
    phis = hyper.phi if spec.spatial else (0.0,) * len(hyper.tau)
    for blk, tau, phi in zip(field_blocks(spec, M.S), hyper.tau, phis):
        omega[blk] = pgmrf_sample(M, PgmrfParams(tau, phi), rng)
    if spec.family.has_psi:
        omega[M.S] = rng.standard_normal() / np.sqrt(hyper.psi)
    return omega


def simulate_latent(spec, hyper, graph, init: StateBelief, T: int, rng, zero_innovations=False):
    """``beta_0 ~ N(m0, C0)`` then ``beta_t = G beta_{t-1} + omega_t`` for ``t = 1..T``."""
    M = build_neighborhood_matrix(graph)
    sys = assemble_system(spec, hyper, graph, M)
    if init.mean.shape != (sys.p,):
        raise StructuralInputError(f"initial mean has length {init.mean.size}, latent dimension is {sys.p}")
    beta = np.empty((T + 1, sys.p))
    beta[0] = mvn_draw(init.mean, init.cov, rng)
    for t in range(1, T + 1):
        beta[t] = sys.G @ beta[t - 1]
        if not zero_innovations:
            beta[t] += sample_innovation(spec, hyper, M, sys.p, rng)
    return beta, sys


def simulate_dataset(cfg: SimConfig):
    """Generate Poisson counts and the true latent path. Deterministic given ``cfg.seed``.

    Returns
    -------
    obs : Observation
    beta : ndarray, shape (T + 1, p)
    """
    n = np.asarray(cfg.n, dtype=float)
    if n.ndim != 2 or n.shape[1] != cfg.graph.S:
        raise StructuralInputError(f"population matrix shape {n.shape} does not match S={cfg.graph.S}")
    rng = np.random.default_rng(cfg.seed)
    beta, sys = simulate_latent(cfg.spec, cfg.hyper, cfg.graph, cfg.init, cfg.T, rng, cfg.zero_innovations)
    theta = beta[1:] @ sys.F
    lo, hi = cfg.clamp
    mu = n * np.exp(np.clip(theta, lo, hi))
    if np.any(theta < lo) or np.any(theta > hi) or np.any(~np.isfinite(mu)) or np.any(mu > MAX_POISSON_MEAN):
        raise ParameterDomainError(
            "simulated log-risk left the representable range "
            f"(max theta {theta.max():.3g}); rescale the initial state or hyperparameters"
        )
    y = rng.poisson(mu)
    return Observation(y, n, clamp=cfg.clamp), beta


def simulate_gaussian(sys: SystemMatrices, beta: np.ndarray, prec, rng) -> GaussianObservation:
    """Identity-response observations of ``F' beta_t`` for ``t = 1..T``."""
    theta = beta[1:] @ sys.F
    prec = np.broadcast_to(np.asarray(prec, float), theta.shape)
    y = theta + rng.standard_normal(theta.shape) / np.sqrt(prec)
    return GaussianObservation(y, prec)


def _as_sequence(systems, T):
    if isinstance(systems, SystemMatrices):
        return [systems] * T
    systems = list(systems)
    if len(systems) != T:
        raise ConfigurationError(f"{len(systems)} system matrices for T={T}")
    return systems


def joint_precision(systems, init: StateBelief, gaussian_obs: GaussianObservation | None, T: int | None = None):
    """Precision matrix and linear term of the joint Gaussian over ``beta_{0:T}``.

    The log-density is ``-0.5 x'Qx + h'x + const``. Evolution terms give the
    block-tridiagonal part; each observation adds ``F V^-1 F'`` on its diagonal
    block.
    """
    if T is None:
        T = gaussian_obs.T
    systems = _as_sequence(systems, T)
    p = init.mean.size
    N = (T + 1) * p
    if N > ORACLE_MAX_DIM:
        raise ConfigurationError(f"dense oracle refuses dimension {N} > {ORACLE_MAX_DIM}")
    Q = np.zeros((N, N))
    h = np.zeros(N)
    P0 = np.linalg.inv(init.cov)
    Q[:p, :p] += P0
    h[:p] += P0 @ init.mean
    for t in range(1, T + 1):
        sys = systems[t - 1]
        cur = slice(t * p, (t + 1) * p)
        prev = slice((t - 1) * p, t * p)
        Wi, G = sys.W_inv, sys.G
        Q[cur, cur] += Wi
        Q[prev, prev] += G.T @ Wi @ G
        Q[cur, prev] -= Wi @ G
        Q[prev, cur] -= G.T @ Wi
        if gaussian_obs is not None and t <= gaussian_obs.T:
            v, y = gaussian_obs.prec[t - 1], gaussian_obs.y[t - 1]
            Q[cur, cur] += (sys.F * v) @ sys.F.T
            h[cur] += sys.F @ (v * y)
    return 0.5 * (Q + Q.T), h


def dense_joint_oracle(systems, init: StateBelief, gaussian_obs: GaussianObservation | None, T: int | None = None):
    """Exact posterior means and marginal covariances of ``beta_t`` for ``t = 0..T``.

    Solves the full joint Gaussian densely; only intended for small test systems.

    Returns
    -------
    means : ndarray, shape (T + 1, p)
    covs : ndarray, shape (T + 1, p, p)
    """
    if T is None:
        T = gaussian_obs.T
    Q, h = joint_precision(systems, init, gaussian_obs, T)
    p = init.mean.size
    Sigma = np.linalg.inv(Q)
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = np.linalg.solve(Q, h)
    means = mu.reshape(T + 1, p)
    covs = np.stack([Sigma[t * p:(t + 1) * p, t * p:(t + 1) * p] for t in range(T + 1)])
    return means, covs


def dense_filtered_moments(systems, init: StateBelief, gaussian_obs: GaussianObservation):
    """Filtered moments ``E[beta_t | y_{1:t}]`` by repeated conditioning in the dense oracle."""
    T = gaussian_obs.T
    means = np.empty((T + 1, init.mean.size))
    covs = np.empty((T + 1, init.mean.size, init.mean.size))
    means[0], covs[0] = init.mean, init.cov
    systems = _as_sequence(systems, T)
    for t in range(1, T + 1):
        mu, cov = dense_joint_oracle(systems[:t], init, gaussian_obs.truncate(t), t)
        means[t], covs[t] = mu[t], cov[t]
    return means, covs
