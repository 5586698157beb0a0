"""One-step-ahead predictive densities and conditional Bayes factors.

For each time ``t`` after the training window, the posterior given data
through ``t - 1`` is sampled by MCMC, every draw is pushed one step through
the evolution equation, and the exact Poisson likelihood of ``y_t`` is
averaged over draws (in log space). Summing the log estimates over
``t = t_star + 1 .. T`` gives the joint log predictive; differences between
models are log conditional Bayes factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .effbs import Observation, _poisson_cells
from .errors import ConfigurationError, NumericalError
from .mcmc import ChainConfig, PriorConfig, _Contamination, run_chains
from .model_spec import Family, SpecId
from .spatial_graph import RegionGraph, build_neighborhood_matrix, pgmrf_sample_spectral


@dataclass(frozen=True)
class PredictiveEstimate:
    log_estimate: float
    se: float  # jackknife standard error of the log estimate
    n_draws: int


@dataclass(frozen=True, eq=False)
class JointPredictive:
    spec: SpecId
    t_star: int
    t_values: np.ndarray
    log_pred: np.ndarray
    se: np.ndarray

    @property
    def total(self) -> float:
        return float(self.log_pred.sum())


@dataclass(frozen=True, eq=False)
class PredictiveReport:
    labels: list
    t_star: int
    t_values: np.ndarray
    log_pred: np.ndarray  # (Q, n_t)
    se: np.ndarray
    joint: np.ndarray  # (Q,)
    log_bf: np.ndarray  # (Q, Q), log B_mn = joint_m - joint_n
    specs: list = field(default_factory=list)


def propagate(beta_prev, hyper: dict, spec: SpecId, graph: RegionGraph, rng, M=None, contamination=None):
    """Draw ``beta_t ~ p(beta_t | beta_{t-1}, Psi)`` for each row of ``beta_prev``.

    ``hyper`` maps hyperparameter names to arrays with one entry per draw.
    """
    beta_prev = np.atleast_2d(np.asarray(beta_prev, float))
    Gn, S = beta_prev.shape[0], graph.S
    M = M if M is not None else build_neighborhood_matrix(graph)
    fam = spec.family

    def col(name, default=0.0):
        return np.broadcast_to(np.asarray(hyper.get(name, default), float), (Gn,))

    b1 = beta_prev[:, :S]
    if fam.has_kappa:
        contamination = contamination or _Contamination(graph)
        kappa = col("kappa")[:, None]
        lvl = (b1 + kappa * (b1 @ contamination.A.T)) / (1.0 + kappa * contamination.h)
    else:
        lvl = b1.copy()
    out = np.empty_like(beta_prev)
    phi = (lambda i: col(f"phi{i}")) if spec.spatial else (lambda i: np.zeros(Gn))
    if fam is Family.III:
        lvl += beta_prev[:, S:]
        out[:, S:] = beta_prev[:, S:] + pgmrf_sample_spectral(M, col("tau2"), phi(2), rng)
    elif fam.has_psi:
        lvl += beta_prev[:, S:S + 1]
        out[:, S] = beta_prev[:, S] + rng.standard_normal(Gn) / np.sqrt(col("psi"))
    out[:, :S] = lvl + pgmrf_sample_spectral(M, col("tau1"), phi(1), rng)
    return out


def _log_mean(ell):
    """``log(mean(exp(ell)))`` and its jackknife standard error."""
    G = ell.size
    est = float(logsumexp(ell) - np.log(G))
    if G < 2:
        return est, float("nan")
    mx = ell.max()
    w = np.exp(ell - mx)
    tot = w.sum()
    with np.errstate(divide="ignore"):
        loo = np.log(np.clip(tot - w, 0.0, None) / (G - 1)) + mx
    if not np.all(np.isfinite(loo)):
        return est, float("inf")
    se = float(np.sqrt((G - 1) / G * np.sum((loo - loo.mean()) ** 2)))
    return est, se


def one_step_predictive(y_t, n_t, beta_prev, hyper: dict, spec: SpecId, graph: RegionGraph, rng,
                        mask=None, M=None) -> PredictiveEstimate:
    """Monte Carlo estimate of ``log p(y_t | D_{t-1})``.

    Parameters
    ----------
    y_t, n_t : array (S,)
        Counts and populations at the predicted time.
    beta_prev : array (G, p)
        Posterior draws of ``beta_{t-1}`` given ``D_{t-1}``.
    hyper : dict of name -> array (G,)
        Matching hyperparameter draws.
    """
    beta_t = propagate(beta_prev, hyper, spec, graph, rng, M)
    theta = beta_t[:, : graph.S]
    cells = _poisson_cells(np.asarray(y_t, float), np.asarray(n_t, float), theta)
    if mask is not None:
        cells = np.where(mask, cells, 0.0)
    ell = cells.sum(axis=1)
    if np.all(ell == -np.inf) or np.any(np.isnan(ell)):
        raise NumericalError("all predictive likelihood terms underflowed or are undefined")
    est, se = _log_mean(ell)
    return PredictiveEstimate(est, se, ell.size)


def _pooled_draws(traces):
    beta = np.concatenate([tr.last_state for tr in traces])
    names = traces[0].names
    hyper = {n: np.concatenate([tr.column(n) for tr in traces]) for n in names}
    return beta, hyper


def predictive_at(obs: Observation, t: int, spec, graph, priors, cfg: ChainConfig, seed: int = 0, threads: int = 1):
    """Fit on ``D_{t-1}`` and estimate ``log p(y_t | D_{t-1})``.

    Randomness comes from ``SeedSequence([seed, t])`` only, so each time
    point can be recomputed in isolation.
    """
    ss = np.random.SeedSequence([seed, t])
    chain_ss, pred_ss = ss.spawn(2)
    try:
        traces = run_chains(obs.truncate(t - 1), spec, graph, priors, cfg, threads=threads, seed=chain_ss)
    except NumericalError as exc:
        raise exc.annotate(t=t) from exc
    beta, hyper = _pooled_draws(traces)
    mask = obs.observed(t)
    return one_step_predictive(obs.y[t - 1], obs.n[t - 1], beta, hyper, spec, graph,
                               np.random.default_rng(pred_ss), mask=mask)


def joint_log_predictive(obs: Observation, spec: SpecId, graph: RegionGraph, priors: PriorConfig,
                         cfg: ChainConfig, t_star: int, seed: int = 0, threads: int = 1,
                         t_end: int | None = None) -> JointPredictive:
    """Sum of one-step log predictives over ``t = t_star + 1 .. t_end`` (default ``T``)."""
    T = obs.T if t_end is None else t_end
    if not 1 <= t_star < T:
        raise ConfigurationError(f"need 1 <= t_star < T, got t_star={t_star}, T={T}")
    ts = np.arange(t_star + 1, T + 1)
    ests = [predictive_at(obs, int(t), spec, graph, priors, cfg, seed, threads) for t in ts]
    return JointPredictive(spec, t_star, ts, np.array([e.log_estimate for e in ests]), np.array([e.se for e in ests]))


def bayes_factor_matrix(joint_log_predictives, t_stars=None) -> np.ndarray:
    """``log B[m, n] = joint[m] - joint[n]``."""
    if t_stars is not None and len(set(t_stars)) > 1:
        raise ConfigurationError(f"models were evaluated with different training windows: {sorted(set(t_stars))}")
    j = np.asarray(joint_log_predictives, dtype=float)
    return j[:, None] - j[None, :]


def compare_models(obs, specs, graph, priors, cfg, t_star, seed=0, threads=1) -> PredictiveReport:
    """Joint log predictive for every model in ``specs`` on the same data and ``t_star``."""
    specs = list(specs)
    if len(specs) < 2:
        raise ConfigurationError("model comparison needs at least two models")
    results = [joint_log_predictive(obs, s, graph, priors, cfg, t_star, seed, threads) for s in specs]
    joint = np.array([r.total for r in results])
    return PredictiveReport(
        labels=[s.token for s in specs],
        t_star=t_star,
        t_values=results[0].t_values,
        log_pred=np.stack([r.log_pred for r in results]),
        se=np.stack([r.se for r in results]),
        joint=joint,
        log_bf=bayes_factor_matrix(joint, [r.t_star for r in results]),
        specs=specs,
    )
