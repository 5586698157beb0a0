"""Areal neighborhood structure and the proper Gaussian Markov random field.

The PGMRF on ``S`` regions has mean zero and precision ``tau * (I + phi * M)``
where ``M`` is the neighborhood matrix: ``M[k, l] = -g_kl`` for neighbors,
``M[k, k] = sum_l g_kl`` and zero elsewhere. Because ``M`` has zero row sums
and is positive semidefinite, the precision is positive definite for any
``tau > 0`` and ``phi >= 0``.

Region indices are 0-based in memory and 1-based in files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError, ParameterDomainError, StructuralInputError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class RegionGraph:
    """Regions, symmetric neighbor sets, similarity weights and across-time neighbors.

    ``weights`` maps the ordered pair ``(k, l)`` with ``k < l`` to ``g_kl``;
    use :meth:`weight` for symmetric lookup.
    """

    S: int
    neighbors: tuple[frozenset[int], ...]
    weights: Mapping[tuple[int, int], float] = field(default_factory=dict)
    across_time_neighbors: tuple[frozenset[int], ...] | None = None

    def __post_init__(self):
        if self.S < 1:
            raise StructuralInputError(f"need at least one region, got S={self.S}")
        nbrs = tuple(frozenset(int(k) for k in n) for n in self.neighbors)
        if len(nbrs) != self.S:
            raise StructuralInputError(f"{len(nbrs)} neighbor sets for S={self.S} regions")
        for l, nl in enumerate(nbrs):
            for k in nl:
                if not 0 <= k < self.S:
                    raise StructuralInputError(f"neighbor index {k + 1} of region {l + 1} out of range")
                if k == l:
                    raise StructuralInputError(f"region {l + 1} lists itself as a neighbor")
                if l not in nbrs[k]:
                    raise StructuralInputError(
                        f"asymmetric neighbor pair ({k + 1}, {l + 1}): {k + 1} in N_{l + 1} but not vice versa"
                    )
        weights = {}
        for (k, l), g in dict(self.weights).items():
            k, l = int(k), int(l)
            key = (min(k, l), max(k, l))
            if key[1] not in nbrs[key[0]]:
                raise StructuralInputError(f"weight given for non-neighbor pair ({k + 1}, {l + 1})")
            if key in weights and weights[key] != g:
                raise StructuralInputError(f"conflicting weights for pair ({key[0] + 1}, {key[1] + 1})")
            if not g > 0:
                raise StructuralInputError(f"nonpositive weight {g} for pair ({k + 1}, {l + 1})")
            weights[key] = float(g)
        # default binary adjacency
        for l, nl in enumerate(nbrs):
            for k in nl:
                weights.setdefault((min(k, l), max(k, l)), 1.0)
        if self.across_time_neighbors is None:
            across = nbrs
        else:
            across = tuple(frozenset(int(k) for k in c) for c in self.across_time_neighbors)
            if len(across) != self.S:
                raise StructuralInputError(f"{len(across)} across-time neighbor sets for S={self.S}")
            for l, cl in enumerate(across):
                for k in cl:
                    if not 0 <= k < self.S:
                        raise StructuralInputError(f"across-time neighbor {k + 1} of region {l + 1} out of range")
                    if k == l:
                        raise StructuralInputError(f"region {l + 1} is its own across-time neighbor")
        object.__setattr__(self, "neighbors", nbrs)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "across_time_neighbors", across)

    def weight(self, k: int, l: int) -> float:
        return self.weights[(min(k, l), max(k, l))]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return sorted(self.weights)

    @classmethod
    def from_edges(
        cls,
        S: int,
        edges: Iterable[Sequence],
        across_edges: Iterable[Sequence] | None = None,
    ) -> "RegionGraph":
        """Build from 0-based ``(k, l)`` or ``(k, l, g_kl)`` tuples (undirected)."""
        nbrs = [set() for _ in range(S)]
        weights = {}
        for e in edges:
            k, l = int(e[0]), int(e[1])
            if not (0 <= k < S and 0 <= l < S):
                raise StructuralInputError(f"edge ({k + 1}, {l + 1}) out of range for S={S}")
            if k == l:
                raise StructuralInputError(f"self-loop on region {k + 1}")
            nbrs[k].add(l)
            nbrs[l].add(k)
            if len(e) > 2:
                key = (min(k, l), max(k, l))
                if key in weights and weights[key] != float(e[2]):
                    raise StructuralInputError(f"conflicting weights for pair ({key[0] + 1}, {key[1] + 1})")
                weights[key] = float(e[2])
        across = None
        if across_edges is not None:
            across = [set() for _ in range(S)]
            for e in across_edges:
                k, l = int(e[0]), int(e[1])
                if not (0 <= k < S and 0 <= l < S):
                    raise StructuralInputError(f"across-time edge ({k + 1}, {l + 1}) out of range")
                if k == l:
                    raise StructuralInputError(f"across-time self-loop on region {k + 1}")
                across[k].add(l)
                across[l].add(k)
        return cls(S, tuple(nbrs), weights, None if across is None else tuple(across))

    @classmethod
    def lattice(cls, nrow: int, ncol: int) -> "RegionGraph":
        """Rook-adjacency grid, regions numbered row by row."""
        edges = []
        for r in range(nrow):
            for c in range(ncol):
                i = r * ncol + c
                if c + 1 < ncol:
                    edges.append((i, i + 1))
                if r + 1 < nrow:
                    edges.append((i, i + ncol))
        return cls.from_edges(nrow * ncol, edges)

    @classmethod
    def path(cls, S: int) -> "RegionGraph":
        return cls.from_edges(S, [(i, i + 1) for i in range(S - 1)])

    @classmethod
    def ring(cls, S: int) -> "RegionGraph":
        return cls.from_edges(S, [(i, (i + 1) % S) for i in range(S)])

    def with_across_time(self, across: Sequence[Iterable[int]]) -> "RegionGraph":
        return RegionGraph(self.S, self.neighbors, self.weights, tuple(frozenset(c) for c in across))


@dataclass(frozen=True, eq=False)
class NeighborhoodMatrix:
    """The matrix ``M`` together with its cached eigendecomposition."""

    M: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def S(self) -> int:
        return self.M.shape[0]


@dataclass(frozen=True)
class PgmrfParams:
    tau: float
    phi: float = 0.0

    def __post_init__(self):
        _check_params(self.tau, self.phi)


def _check_params(tau, phi):
    if not np.isfinite(tau) or tau <= 0:
        raise ParameterDomainError(f"tau must be positive, got {tau}")
    if not np.isfinite(phi) or phi < 0:
        raise ParameterDomainError(f"phi must be nonnegative, got {phi}")


def build_neighborhood_matrix(graph: RegionGraph) -> NeighborhoodMatrix:
    S = graph.S
    M = np.zeros((S, S))
    for (k, l), g in graph.weights.items():
        M[k, l] = M[l, k] = -g
    M[np.diag_indices(S)] = -M.sum(axis=1)
    lam, U = np.linalg.eigh(M)
    # M is PSD with a zero eigenvalue; clip roundoff below zero
    lam = np.clip(lam, 0.0, None)
    M.setflags(write=False)
    lam.setflags(write=False)
    U.setflags(write=False)
    return NeighborhoodMatrix(M, lam, U)


def pgmrf_precision(M: NeighborhoodMatrix, p: PgmrfParams) -> np.ndarray:
    _check_params(p.tau, p.phi)
    return p.tau * (np.eye(M.S) + p.phi * M.M)


def pgmrf_log_det(M: NeighborhoodMatrix, p: PgmrfParams) -> float:
    """``log det(tau (I + phi M))`` from the cached eigenvalues."""
    _check_params(p.tau, p.phi)
    return float(M.S * np.log(p.tau) + np.log1p(p.phi * M.eigenvalues).sum())


def pgmrf_quad_form(omega: np.ndarray, M: NeighborhoodMatrix, p: PgmrfParams) -> float:
    omega = np.asarray(omega, dtype=float)
    return float(p.tau * (omega @ omega + p.phi * (omega @ M.M @ omega)))


def pgmrf_log_density(omega, M: NeighborhoodMatrix, p: PgmrfParams) -> float:
    """Normalized Gaussian log-density of ``omega`` under PGMRF(0, tau (I + phi M))."""
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (M.S,):
        raise StructuralInputError(f"omega has shape {omega.shape}, expected ({M.S},)")
    return 0.5 * (pgmrf_log_det(M, p) - M.S * LOG_2PI - pgmrf_quad_form(omega, M, p))


def pgmrf_sample(M: NeighborhoodMatrix, p: PgmrfParams, rng: np.random.Generator, size: int | None = None):
    """Draw from N(0, [tau (I + phi M)]^-1) through a Cholesky factor of the precision.

    With ``Q = L L'`` the draw is ``L'^-1 z``. Returns shape ``(S,)`` or ``(size, S)``.
    """
    Q = pgmrf_precision(M, p)
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise NumericalError("PGMRF precision is not positive definite",
                             min_eig=float(np.linalg.eigvalsh(Q).min())) from None
    piv = np.diag(L).min()
    if not piv > 0:
        raise NumericalError("PGMRF Cholesky factor has nonpositive pivot", min_eig=float(piv))
    n = 1 if size is None else size
    z = rng.standard_normal((M.S, n))
    x = solve_triangular(L.T, z, lower=False, check_finite=False).T
    return x[0] if size is None else x


def pgmrf_sample_spectral(M: NeighborhoodMatrix, tau, phi, rng: np.random.Generator) -> np.ndarray:
    """Vectorized draws with per-draw ``tau`` and ``phi`` arrays of equal length.

    Uses ``Q = U diag(tau (1 + phi lam)) U'``, so one draw costs a matrix-vector
    product instead of a factorization.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    phi = np.broadcast_to(np.asarray(phi, dtype=float), tau.shape)
    scale = 1.0 / np.sqrt(tau[:, None] * (1.0 + phi[:, None] * M.eigenvalues[None, :]))
    z = rng.standard_normal((tau.size, M.S))
    return (z * scale) @ M.eigenvectors.T


def pgmrf_covariance(M: NeighborhoodMatrix, tau: float, phi: float) -> np.ndarray:
    U, lam = M.eigenvectors, M.eigenvalues
    return (U / (tau * (1.0 + phi * lam))) @ U.T

