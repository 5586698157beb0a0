"""Extended forward filter, backward sampler and observation likelihoods.

The forward filter linearizes the Poisson response ``f(theta) = n exp(theta)``
once per time step around the prior prediction ``theta_hat = F' a_t``, turning
each count into an artificial Gaussian observation. The backward sampler then
draws a whole latent path from the resulting Gaussian approximation.

Time is 1-based in the recursion (``t = 1..T``) and row ``t - 1`` of an
observation array holds time ``t``; index 0 of filter output arrays is the
initial prior.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln

from .errors import NumericalError, StructuralInputError
from .model_spec import SystemMatrices

LOG_2PI = np.log(2.0 * np.pi)
DEFAULT_CLAMP = (-50.0, 50.0)


class ClampWarning(RuntimeWarning):
    """The linearization point left the clamp window and was truncated."""


@dataclass(frozen=True, eq=False)
class StateBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise StructuralInputError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True, eq=False)
class Observation:
    """Poisson counts ``y`` (T x S) with populations ``n`` and an optional missingness mask.

    ``mask[t, s]`` is True where the cell was observed.
    """

    y: np.ndarray
    n: np.ndarray
    mask: np.ndarray | None = None
    clamp: tuple[float, float] = DEFAULT_CLAMP

    def __post_init__(self):
        y = np.asarray(self.y)
        n = np.asarray(self.n, dtype=float)
        if y.ndim == 1:
            y = y[None]
        if n.ndim == 1:
            n = n[None]
        if n.shape != y.shape:
            raise StructuralInputError(f"counts shape {y.shape} differs from populations shape {n.shape}")
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise StructuralInputError("counts must be nonnegative integers")
        if np.any(~(n > 0)):
            raise StructuralInputError("populations must be strictly positive")
        mask = None if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask is not None and mask.shape != y.shape:
            raise StructuralInputError(f"mask shape {mask.shape} differs from counts shape {y.shape}")
        object.__setattr__(self, "y", y.astype(float))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "mask", mask)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def S(self) -> int:
        return self.y.shape[1]

    def truncate(self, T: int) -> "Observation":
        return Observation(self.y[:T], self.n[:T], None if self.mask is None else self.mask[:T], self.clamp)

    def observed(self, t: int) -> np.ndarray | None:
        return None if self.mask is None else self.mask[t - 1]

    def linearize(self, t: int, theta_hat: np.ndarray):
        y_hat, prec = linearize_observation(self.y[t - 1], self.n[t - 1], theta_hat, self.clamp)
        obs = self.observed(t)
        if obs is not None:
            prec = np.where(obs, prec, 0.0)
            y_hat = np.where(obs, y_hat, 0.0)
        return y_hat, prec

    def log_lik(self, t: int, theta: np.ndarray) -> np.ndarray:
        """Exact Poisson log-likelihood at time ``t``; ``theta`` may be (S,) or (G, S)."""
        ll = _poisson_cells(self.y[t - 1], self.n[t - 1], theta)
        obs = self.observed(t)
        if obs is not None:
            ll = np.where(obs, ll, 0.0)
        return ll.sum(axis=-1)


@dataclass(frozen=True, eq=False)
class GaussianObservation:
    """Identity-response Gaussian observations ``y_t ~ N(F' beta_t, diag(1/prec_t))``.

    Swapping this in for :class:`Observation` turns the extended filter into an
    exact Kalman filter, which is how the filter and sampler are checked
    against a dense joint-Gaussian computation.
    """

    y: np.ndarray
    prec: np.ndarray

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        prec = np.broadcast_to(np.asarray(self.prec, dtype=float), y.shape).copy()
        if np.any(prec < 0):
            raise StructuralInputError("observation precisions must be nonnegative")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "prec", prec)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def S(self) -> int:
        return self.y.shape[1]

    def truncate(self, T: int) -> "GaussianObservation":
        return GaussianObservation(self.y[:T], self.prec[:T])

    def linearize(self, t: int, theta_hat: np.ndarray):
        return self.y[t - 1], self.prec[t - 1]

    def log_lik(self, t: int, theta: np.ndarray) -> np.ndarray:
        y, prec = self.y[t - 1], self.prec[t - 1]
        on = prec > 0
        r = y - theta
        ll = np.where(on, 0.5 * (np.log(np.where(on, prec, 1.0)) - LOG_2PI - prec * r * r), 0.0)
        return ll.sum(axis=-1)


@dataclass(frozen=True, eq=False)
class FilterOutput:
    """Per-time moments from :func:`forward_filter`.

    ``a[t], R[t]`` are the one-step priors (row 0 unused, set to NaN);
    ``m[t], C[t]`` the posteriors with ``m[0], C[0]`` the initial prior;
    ``P[t]`` is ``C[t]^-1`` and ``theta_hat[t]`` the linearization point.
    """

    a: np.ndarray
    R: np.ndarray
    m: np.ndarray
    C: np.ndarray
    P: np.ndarray
    theta_hat: np.ndarray

    @property
    def T(self) -> int:
        return self.m.shape[0] - 1

    @property
    def priors(self) -> list[StateBelief]:
        return [StateBelief(self.a[t], self.R[t]) for t in range(1, self.T + 1)]

    @property
    def posteriors(self) -> list[StateBelief]:
        return [StateBelief(self.m[t], self.C[t]) for t in range(self.T + 1)]


def _poisson_cells(y, n, theta):
    log_mu = theta + np.log(n)
    return y * log_mu - np.exp(log_mu) - gammaln(y + 1.0)


def poisson_log_lik(y_t, n_t, theta_t) -> float:
    """``sum_s [y log(n lambda) - n lambda - log y!]`` with ``lambda = exp(theta)``."""
    return float(_poisson_cells(np.asarray(y_t, float), np.asarray(n_t, float), np.asarray(theta_t, float)).sum())


def linearize_observation(y_t, n_t, theta_hat, clamp=DEFAULT_CLAMP):
    """Artificial observation and its precision from a first-order expansion of ``n exp(theta)``.

    Returns
    -------
    y_hat : ndarray
        ``(y - f) / f' + theta_hat`` with ``f = f' = n exp(theta_hat)``.
    prec : ndarray
        Diagonal of the approximate precision, ``f'^2 / Var(y) = n exp(theta_hat)``.
    """
    y_t = np.asarray(y_t, dtype=float)
    n_t = np.asarray(n_t, dtype=float)
    theta_hat = np.asarray(theta_hat, dtype=float)
    lo, hi = clamp
    clipped = np.clip(theta_hat, lo, hi)
    if np.any(clipped != theta_hat):
        warnings.warn(
            f"linearization point outside [{lo}, {hi}] clamped in {int(np.sum(clipped != theta_hat))} cell(s)",
            ClampWarning,
            stacklevel=2,
        )
    f = n_t * np.exp(clipped)
    y_hat = (y_t - f) / f + clipped
    return y_hat, f


def approx_log_lik(y_t, n_t, theta_hat_t, theta_t) -> float:
    """Gaussian approximate log-likelihood implied by the linearization.

    ``-0.5 sum_s [log 2pi + log Sig + Sig^-1 {y - Sig + Sig (theta_hat - theta)}^2]``
    with ``Sig = n exp(theta_hat)``. As a function of ``y`` this is the
    log-density of ``N(f(theta_hat) + f'(theta_hat)(theta - theta_hat), Sig)``.
    """
    y = np.asarray(y_t, float)
    sig = np.asarray(n_t, float) * np.exp(np.asarray(theta_hat_t, float))
    r = y - sig + sig * (np.asarray(theta_hat_t, float) - np.asarray(theta_t, float))
    return float(-0.5 * np.sum(LOG_2PI + np.log(sig) + r * r / sig))


def _chol(A, t, what):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite", t=t,
                             min_eig=float(np.linalg.eigvalsh(A).min())) from None
    return L


def _spd_inv(A, t, what):
    L = _chol(A, t, what)
    Li = solve_triangular(L, np.eye(L.shape[0]), lower=True, check_finite=False)
    return Li.T @ Li


def _sym(A):
    return 0.5 * (A + A.T)


def forward_filter(obs, sys: SystemMatrices, init: StateBelief) -> FilterOutput:
    """Run the extended forward filter over ``t = 1..obs.T``.

    ``obs`` is anything with ``T`` and ``linearize(t, theta_hat)``: an
    :class:`Observation` for Poisson data or a :class:`GaussianObservation`.
    """
    T, p = obs.T, sys.p
    if init.mean.shape != (p,):
        raise StructuralInputError(f"initial mean has length {init.mean.size}, latent dimension is {p}")
    if obs.S != sys.S:
        raise StructuralInputError(f"observations have {obs.S} regions, system has {sys.S}")
    F, G, W = sys.F, sys.G, sys.W
    a = np.full((T + 1, p), np.nan)
    R = np.full((T + 1, p, p), np.nan)
    m = np.empty((T + 1, p))
    C = np.empty((T + 1, p, p))
    P = np.empty((T + 1, p, p))
    theta_hat = np.full((T + 1, sys.S), np.nan)
    m[0] = init.mean
    C[0] = _sym(init.cov)
    P[0] = _spd_inv(C[0], 0, "initial covariance C_0")
    for t in range(1, T + 1):
        a_t = G @ m[t - 1]
        R_t = _sym(G @ C[t - 1] @ G.T + W)
        R_inv = _sym(_spd_inv(R_t, t, "prior covariance R_t"))
        th = F.T @ a_t
        y_hat, v = obs.linearize(t, th)
        P_t = R_inv + (F * v) @ F.T
        C_t = _sym(_spd_inv(P_t, t, "posterior precision C_t^-1"))
        m[t] = C_t @ (F @ (v * y_hat) + R_inv @ a_t)
        a[t], R[t], C[t], P[t], theta_hat[t] = a_t, R_t, C_t, _sym(P_t), th
    return FilterOutput(a, R, m, C, P, theta_hat)


def backward_moments(filt: FilterOutput, sys: SystemMatrices, t: int, beta_next):
    """Mean ``b_t`` and covariance ``B_t`` of ``beta_t | beta_{t+1}, D_t``."""
    GtWi = sys.G.T @ sys.W_inv
    Q = _sym(filt.P[t] + GtWi @ sys.G)
    B = _sym(_spd_inv(Q, t, "backward precision B_t^-1"))
    b = B @ (GtWi @ np.asarray(beta_next, float) + filt.P[t] @ filt.m[t])
    return b, B


def backward_sample(filt: FilterOutput, sys: SystemMatrices, rng: np.random.Generator, size: int | None = None):
    """Draw latent paths ``beta_{0:T}`` given the filter output.

    Returns shape ``(T + 1, p)``, or ``(size, T + 1, p)`` when ``size`` is given;
    all draws share the per-time factorizations.
    """
    T, p = filt.T, sys.p
    k = 1 if size is None else size
    out = np.empty((k, T + 1, p))
    L = _chol(filt.C[T], T, "posterior covariance C_T")
    out[:, T] = filt.m[T] + rng.standard_normal((k, p)) @ L.T
    GtWi = sys.G.T @ sys.W_inv
    GtWiG = GtWi @ sys.G
    for t in range(T - 1, -1, -1):
        Q = _sym(filt.P[t] + GtWiG)
        Lq = _chol(Q, t, "backward precision B_t^-1")
        rhs = out[:, t + 1] @ GtWi.T + filt.P[t] @ filt.m[t]
        b = cho_solve((Lq, True), rhs.T, check_finite=False)
        z = rng.standard_normal((p, k))
        out[:, t] = (b + solve_triangular(Lq.T, z, lower=False, check_finite=False)).T
    return out[0] if size is None else out


def effbs(obs, sys: SystemMatrices, init: StateBelief, rng: np.random.Generator):
    """One extended forward filter / backward sampler draw of ``beta_{0:T}``."""
    return backward_sample(forward_filter(obs, sys, init), sys, rng)
