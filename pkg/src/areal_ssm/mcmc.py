"""MCMC over the latent process and hyperparameters, plus Gelman-Rubin diagnostics.

Each iteration draws ``beta_{0:T}`` by EFFBS given the hyperparameters, then
updates the hyperparameter blocks in the order tau, phi, kappa, psi:

* ``tau_i`` and ``psi`` from their exact Gamma full conditionals;
* ``phi_i`` by random-walk Metropolis on ``log phi``;
* ``kappa`` by random-walk Metropolis on ``logit kappa``.

Gamma distributions use the shape/rate parameterization throughout.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .effbs import StateBelief, backward_sample, forward_filter
from .errors import ConfigurationError, NumericalError
from .model_spec import Family, HyperParams, SpecId, assemble_system, latent_dimension
from .spatial_graph import NeighborhoodMatrix, RegionGraph, build_neighborhood_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PriorConfig:
    """Priors on hyperparameters and on ``beta_0``.

    ``init_mean`` is the prior mean of the log-risk block of ``beta_0`` (scalar
    or length-S array); gradient blocks get mean zero and variance
    ``init_gradient_var``.
    """

    tau_shape: float = 1.0
    tau_rate: float = 1.0
    phi_upper: float = 100.0
    psi_shape: float = 16.0
    psi_rate: float = 0.1
    init_mean: float | tuple = -16.25
    init_var: float = 1.0
    init_gradient_var: float = 1.0

    def __post_init__(self):
        for name in ("tau_shape", "tau_rate", "psi_shape", "psi_rate", "init_var", "init_gradient_var"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if not self.phi_upper > 1:
            raise ConfigurationError("phi_upper must exceed 1")
        if np.ndim(self.init_mean):
            object.__setattr__(self, "init_mean", tuple(float(x) for x in self.init_mean))

    # phi prior: flat on (0, 1), phi^-2 on (1, a), normalized over (0, a)
    @property
    def phi_norm(self) -> float:
        return 1.0 + (1.0 - 1.0 / self.phi_upper)

    def phi_log_prior(self, phi: float) -> float:
        if not 0 < phi < self.phi_upper:
            return -np.inf
        lz = np.log(self.phi_norm)
        return -lz if phi <= 1 else -2.0 * np.log(phi) - lz

    def phi_cdf(self, phi):
        phi = np.asarray(phi, dtype=float)
        z = self.phi_norm
        inner = np.where(phi <= 1, phi, 2.0 - 1.0 / np.maximum(phi, 1.0))
        return np.clip(inner / z, 0.0, 1.0)

    def phi_ppf(self, u):
        u = np.asarray(u, dtype=float) * self.phi_norm
        return np.where(u <= 1, u, 1.0 / (2.0 - np.maximum(u, 1.0)))

    def init_state(self, spec: SpecId, S: int) -> StateBelief:
        p = latent_dimension(spec, S)
        mean = np.zeros(p)
        var = np.full(p, self.init_gradient_var)
        mean[:S] = np.broadcast_to(np.asarray(self.init_mean, float), (S,))
        var[:S] = self.init_var
        return StateBelief(mean, np.diag(var))

    def draw(self, spec: SpecId, rng: np.random.Generator) -> HyperParams:
        """Independent draw of every hyperparameter from its prior."""
        n = spec.family.n_fields
        tau = tuple(rng.gamma(self.tau_shape, 1.0 / self.tau_rate, size=n))
        phi = tuple(self.phi_ppf(rng.uniform(size=n))) if spec.spatial else (0.0,) * n
        kappa = rng.uniform() if spec.family.has_kappa else None
        psi = rng.gamma(self.psi_shape, 1.0 / self.psi_rate) if spec.family.has_psi else None
        return HyperParams(tau, phi, kappa, psi)


@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 20000
    burn_in: int = 10000
    n_chains: int = 2
    seed: int = 0
    rw_scales: dict = field(default_factory=lambda: {"phi": 0.5, "kappa": 0.5})
    latent_thin: int = 10
    adapt: bool = False
    random_scan: bool = False

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ConfigurationError(f"need 0 <= burn_in < n_iter, got burn_in={self.burn_in}, n_iter={self.n_iter}")
        if self.n_chains < 1:
            raise ConfigurationError("n_chains must be at least 1")
        if self.latent_thin < 1:
            raise ConfigurationError("latent_thin must be at least 1")


@dataclass(eq=False)
class Trace:
    """Post-burn-in draws of one chain.

    ``hyper[i, j]`` is hyperparameter ``names[j]`` at kept iteration
    ``iterations[i]``; ``latent`` holds full paths every ``latent_thin``
    iterations and ``last_state`` the final-time latent vector at every kept
    iteration.
    """

    spec: SpecId
    names: list
    iterations: np.ndarray
    hyper: np.ndarray
    latent_iterations: np.ndarray
    latent: np.ndarray
    last_state: np.ndarray
    acceptance: dict
    seed: str = ""

    def __len__(self):
        return len(self.iterations)

    def column(self, name: str) -> np.ndarray:
        return self.hyper[:, self.names.index(name)]

    def hyper_params(self, i: int) -> HyperParams:
        return HyperParams.from_dict(self.spec, dict(zip(self.names, self.hyper[i])))


# ---------------------------------------------------------------------------
# conjugate blocks


def tau_full_conditional(innovations, phi, M: NeighborhoodMatrix, prior: PriorConfig):
    """Shape and rate of ``tau | omega_{1:T}, phi``."""
    om = np.atleast_2d(np.asarray(innovations, float))
    T, S = om.shape if om.size else (0, M.S)
    quad = np.einsum("ti,ti->", om, om) + phi * np.einsum("ti,ij,tj->", om, M.M, om) if T else 0.0
    rate = prior.tau_rate + 0.5 * quad
    if not rate > 0:
        raise NumericalError("nonpositive Gamma rate in tau update")
    return prior.tau_shape + 0.5 * T * S, rate


def sample_tau(innovations, phi, M, prior: PriorConfig, rng) -> float:
    shape, rate = tau_full_conditional(innovations, phi, M, prior)
    return rng.gamma(shape, 1.0 / rate)


def psi_full_conditional(beta2_path, prior: PriorConfig):
    d = np.diff(np.asarray(beta2_path, float))
    rate = prior.psi_rate + 0.5 * float(d @ d)
    if not rate > 0:
        raise NumericalError("nonpositive Gamma rate in psi update")
    return prior.psi_shape + 0.5 * d.size, rate


def sample_psi(beta2_path, prior: PriorConfig, rng) -> float:
    shape, rate = psi_full_conditional(beta2_path, prior)
    return rng.gamma(shape, 1.0 / rate)


# ---------------------------------------------------------------------------
# Metropolis blocks


def accept_prob(log_target_cur: float, log_target_prop: float) -> float:
    """Acceptance probability for a symmetric proposal."""
    if log_target_prop == -np.inf:
        return 0.0
    return float(np.exp(min(0.0, log_target_prop - log_target_cur)))


def _metropolis(u, log_target, scale, rng):
    prop = u + scale * rng.standard_normal()
    lp_cur = log_target(u)
    lp_prop = log_target(prop)
    if np.log(rng.uniform()) < lp_prop - lp_cur:
        return prop, True
    return u, False


def phi_log_target(log_phi: float, innovations, tau: float, M: NeighborhoodMatrix, prior: PriorConfig) -> float:
    """Log-density of ``u = log phi`` given the innovations (Jacobian included)."""
    om = np.atleast_2d(np.asarray(innovations, float))
    return _phi_log_target_stats(log_phi, *_phi_stats(om, M), tau, M, prior)


def _phi_stats(om, M):
    if om.size == 0:
        return 0, 0.0, 0.0
    return om.shape[0], float(np.einsum("ti,ti->", om, om)), float(np.einsum("ti,ij,tj->", om, M.M, om))


def _phi_log_target_stats(u, T, q0, q1, tau, M, prior):
    if not u < np.log(prior.phi_upper):
        return -np.inf
    phi = np.exp(u)
    lp = prior.phi_log_prior(phi)
    if lp == -np.inf:
        return -np.inf
    # tau terms independent of phi are dropped
    return 0.5 * T * float(np.log1p(phi * M.eigenvalues).sum()) - 0.5 * tau * phi * q1 + lp + u


def sample_phi(innovations, tau, M, prior: PriorConfig, rw_scale, rng, phi):
    """One random-walk Metropolis step on ``log phi``. Returns ``(phi, accepted)``."""
    stats = _phi_stats(np.atleast_2d(np.asarray(innovations, float)), M)
    u, acc = _metropolis(np.log(phi), lambda v: _phi_log_target_stats(v, *stats, tau, M, prior), rw_scale, rng)
    return float(np.exp(u)), acc


class _Contamination:
    """Cached ``A[k, l] = 1{k in C_l}`` and ``h`` for fast ``G(kappa)``."""

    def __init__(self, graph: RegionGraph):
        S = graph.S
        self.A = np.zeros((S, S))
        for l, cl in enumerate(graph.across_time_neighbors):
            for k in cl:
                self.A[k, l] = 1.0
        self.h = max((len(c) for c in graph.across_time_neighbors), default=0)
        self.S = S

    def G(self, kappa):
        return (np.eye(self.S) + kappa * self.A) / (1.0 + kappa * self.h)


def field_innovations(beta, spec: SpecId, kappa, contamination: _Contamination):
    """Innovations of the log-risk block, ``beta1_t - G1 beta1_{t-1} - gradient``."""
    S = contamination.S
    b1 = beta[:, :S]
    G1 = contamination.G(kappa) if spec.family.has_kappa else np.eye(S)
    om = b1[1:] - b1[:-1] @ G1.T
    if spec.family is Family.III:
        om -= beta[:-1, S:]
    elif spec.family.has_psi:
        om -= beta[:-1, S:S + 1]
    return om


def kappa_log_target(logit_kappa, beta, spec, hyper, M, contamination, prior=None) -> float:
    """Log-density of ``v = logit kappa`` given the latent path (Jacobian included).

    Uniform(0, 1) prior; only the log-risk evolution depends on ``kappa``.
    """
    kappa = float(expit(logit_kappa))
    if not 0 < kappa < 1:
        return -np.inf
    om = field_innovations(beta, spec, kappa, contamination)
    tau, phi = hyper.tau[0], hyper.phi[0] if spec.spatial else 0.0
    quad = np.einsum("ti,ti->", om, om) + phi * np.einsum("ti,ij,tj->", om, M.M, om)
    return -0.5 * tau * quad + np.log(kappa) + np.log1p(-kappa)


def sample_kappa(beta, spec, hyper, M, contamination, prior, rw_scale, rng):
    """One random-walk Metropolis step on ``logit kappa``. Returns ``(kappa, accepted)``."""
    v, acc = _metropolis(
        float(logit(hyper.kappa)),
        lambda x: kappa_log_target(x, beta, spec, hyper, M, contamination),
        rw_scale,
        rng,
    )
    return float(expit(v)), acc


# ---------------------------------------------------------------------------
# the chain


class ChainKernel:
    """Everything that stays fixed across iterations of one model fit."""

    def __init__(self, obs, spec: SpecId, graph: RegionGraph, priors: PriorConfig, init: StateBelief | None = None):
        self.obs = obs
        self.spec = spec
        self.graph = graph
        self.priors = priors
        self.M = build_neighborhood_matrix(graph)
        self.contamination = _Contamination(graph)
        self.init = init if init is not None else priors.init_state(spec, graph.S)
        self.S = graph.S

    def system(self, hyper: HyperParams):
        return assemble_system(self.spec, hyper, self.graph, self.M)

    def draw_latent(self, hyper: HyperParams, rng, obs=None):
        sys = self.system(hyper)
        filt = forward_filter(self.obs if obs is None else obs, sys, self.init)
        return backward_sample(filt, sys, rng)

    def blocks(self):
        spec = self.spec
        out = [("tau", i) for i in range(spec.family.n_fields)]
        if spec.spatial:
            out += [("phi", i) for i in range(spec.family.n_fields)]
        if spec.family.has_kappa:
            out.append(("kappa", 0))
        if spec.family.has_psi:
            out.append(("psi", 0))
        return out

    def _block_innovations(self, beta, hyper, i):
        S = self.S
        if i == 0:
            return field_innovations(beta, self.spec, hyper.kappa, self.contamination)
        return np.diff(beta[:, S:2 * S], axis=0)

    def draw_hyper(self, beta, hyper: HyperParams, rng, scales=None, order=None):
        """Update every hyperparameter block once. Returns ``(hyper, accepted)``."""
        scales = scales or {"phi": 0.5, "kappa": 0.5}
        tau, phi = list(hyper.tau), list(hyper.phi)
        kappa, psi = hyper.kappa, hyper.psi
        accepted = {}
        for name, i in order or self.blocks():
            cur = HyperParams(tuple(tau), tuple(phi), kappa, psi)
            if name == "tau":
                om = self._block_innovations(beta, cur, i)
                tau[i] = sample_tau(om, phi[i], self.M, self.priors, rng)
            elif name == "phi":
                om = self._block_innovations(beta, cur, i)
                phi[i], accepted[f"phi{i + 1}"] = sample_phi(om, tau[i], self.M, self.priors, scales["phi"], rng, phi[i])
            elif name == "kappa":
                kappa, accepted["kappa"] = sample_kappa(
                    beta, self.spec, cur, self.M, self.contamination, self.priors, scales["kappa"], rng
                )
            else:
                psi = sample_psi(beta[:, self.S], self.priors, rng)
        return HyperParams(tuple(tau), tuple(phi), kappa, psi), accepted


def _seed_label(seed) -> str:
    if isinstance(seed, np.random.SeedSequence):
        return f"entropy={seed.entropy} spawn_key={tuple(seed.spawn_key)}"
    return str(seed)


def run_chain(obs, spec: SpecId, graph: RegionGraph, priors: PriorConfig, cfg: ChainConfig, rng=None,
              init_hyper: HyperParams | None = None, init: StateBelief | None = None, seed_label: str = "") -> Trace:
    """Run one chain and keep the post-burn-in draws.

    With no ``init_hyper`` the starting hyperparameters are drawn from the
    priors using ``rng``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    kernel = ChainKernel(obs, spec, graph, priors, init)
    hyper = init_hyper if init_hyper is not None else priors.draw(spec, rng)
    names = spec.hyper_names()
    S, T = graph.S, obs.T
    p = latent_dimension(spec, S)
    n_keep = cfg.n_iter - cfg.burn_in
    lat_iters = np.arange(cfg.burn_in, cfg.n_iter)[:: cfg.latent_thin]
    hyper_draws = np.empty((n_keep, len(names)))
    latent = np.empty((lat_iters.size, T + 1, p))
    last_state = np.empty((n_keep, p))
    scales = dict(cfg.rw_scales)
    metro = [n for n in names if n.startswith("phi") or n == "kappa"]
    acc_count = dict.fromkeys(metro, 0)
    batch = dict.fromkeys(metro, 0)
    blocks = kernel.blocks()
    j = 0
    for it in range(cfg.n_iter):
        block = "latent"
        try:
            beta = kernel.draw_latent(hyper, rng)
            block = "hyperparameters"
            order = [blocks[k] for k in rng.permutation(len(blocks))] if cfg.random_scan else blocks
            hyper, accepted = kernel.draw_hyper(beta, hyper, rng, scales, order)
        except NumericalError as exc:
            raise exc.annotate(iteration=it, block=block) from exc
        if it >= cfg.burn_in:
            k = it - cfg.burn_in
            hyper_draws[k] = [hyper.as_dict(spec)[n] for n in names]
            last_state[k] = beta[-1]
            if k % cfg.latent_thin == 0:
                latent[k // cfg.latent_thin] = beta
            for n, a in accepted.items():
                acc_count[n] += a
        elif cfg.adapt:
            for n, a in accepted.items():
                batch[n] += a
            j += 1
            if j == 50:
                # Robbins-Monro on the log step size toward ~35% acceptance
                step = 1.0 / np.sqrt(it // 50 + 1)
                for n in metro:
                    key = "kappa" if n == "kappa" else "phi"
                    scales[key] *= np.exp(step * (batch[n] / 50 - 0.35))
                    batch[n] = 0
                j = 0
    acceptance = {n: acc_count[n] / n_keep for n in metro}
    return Trace(spec, names, np.arange(cfg.burn_in, cfg.n_iter), hyper_draws, lat_iters, latent, last_state,
                 acceptance, seed_label)


def _chain_job(args):
    obs, spec, graph, priors, cfg, child, init = args
    return run_chain(obs, spec, graph, priors, cfg, np.random.default_rng(child), init=init,
                     seed_label=_seed_label(child))


def chain_seeds(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def run_chains(obs, spec, graph, priors, cfg: ChainConfig, threads: int = 1, init=None, seed=None) -> list[Trace]:
    """Run ``cfg.n_chains`` independent chains.

    Chain ``k`` uses the ``k``-th child of ``SeedSequence(cfg.seed)`` (or of
    ``seed`` when given), so results do not depend on ``threads``.
    """
    children = chain_seeds(cfg.seed if seed is None else seed).spawn(cfg.n_chains)
    jobs = [(obs, spec, graph, priors, cfg, c, init) for c in children]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(_chain_job, jobs))
    return [_chain_job(j) for j in jobs]


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True, eq=False)
class GelmanRubin:
    """PSRF per scalar parameter; ``degenerate[j]`` marks zero within-chain variance (``rhat`` NaN)."""

    rhat: np.ndarray
    degenerate: np.ndarray


def gelman_rubin(chains) -> GelmanRubin:
    """Potential scale reduction factor.

    ``chains`` has shape ``(m, n)`` or ``(m, n, k)``: ``m`` chains of ``n``
    draws of ``k`` parameters. Uses ``sqrt(((n-1)/n W + B/n) / W)`` with ``W``
    the mean within-chain variance and ``B/n`` the variance of chain means.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    m, n = x.shape[:2]
    if m < 2:
        raise ConfigurationError(f"Gelman-Rubin needs at least 2 chains, got {m}")
    if n < 10:
        raise ConfigurationError(f"Gelman-Rubin needs at least 10 draws per chain, got {n}")
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B_over_n = x.mean(axis=1).var(axis=0, ddof=1)
    degenerate = ~(W > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(((n - 1) / n * W + B_over_n) / W)
    rhat = np.where(degenerate, np.nan, rhat)
    return GelmanRubin(rhat, degenerate)
