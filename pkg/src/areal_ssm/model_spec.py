"""The five state-space families, each with diagonal or spatial innovations.

=====  ==========================  ==================  ===========================
token  family                      latent dimension    hyperparameters
=====  ==========================  ==================  ===========================
I      first-order trend           S                   tau1, phi1
II     contamination               S                   tau1, phi1, kappa
III    second-order trend          2S                  tau1, phi1, tau2, phi2
IV     level + common gradient     S + 1               tau1, phi1, psi
V      contamination + gradient    S + 1               tau1, phi1, kappa, psi
=====  ==========================  ==================  ===========================

Under diagonal innovations every ``phi`` is fixed at zero, so the evolution
precision of a field block is ``tau * I``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParameterDomainError
from .spatial_graph import NeighborhoodMatrix, RegionGraph, pgmrf_covariance


class Family(enum.Enum):
    I = "order1"
    II = "contamination"
    III = "order2"
    IV = "common-gradient"
    V = "contamination-gradient"

    @property
    def n_fields(self) -> int:
        return 2 if self is Family.III else 1

    @property
    def has_kappa(self) -> bool:
        return self in (Family.II, Family.V)

    @property
    def has_psi(self) -> bool:
        return self in (Family.IV, Family.V)


INNOVATIONS = ("diagonal", "spatial")


@dataclass(frozen=True)
class SpecId:
    family: Family
    innovations: str = "spatial"

    def __post_init__(self):
        if not isinstance(self.family, Family):
            object.__setattr__(self, "family", parse_family(self.family))
        if self.innovations not in INNOVATIONS:
            raise ConfigurationError(
                f"innovations must be one of {INNOVATIONS}, got {self.innovations!r}"
            )

    @property
    def spatial(self) -> bool:
        return self.innovations == "spatial"

    @property
    def token(self) -> str:
        return f"{self.family.value}:{self.innovations}"

    @property
    def label(self) -> str:
        return f"{self.family.name}-{'SDI' if self.spatial else 'IND'}"

    def hyper_names(self) -> list[str]:
        """Names of the free hyperparameters, in block-update order."""
        names = [f"tau{i + 1}" for i in range(self.family.n_fields)]
        if self.spatial:
            names += [f"phi{i + 1}" for i in range(self.family.n_fields)]
        if self.family.has_kappa:
            names.append("kappa")
        if self.family.has_psi:
            names.append("psi")
        return names

    @classmethod
    def parse(cls, token: str) -> "SpecId":
        """Parse ``"family[:innovations]"``; innovations default to spatial."""
        fam, _, innov = token.strip().partition(":")
        return cls(parse_family(fam), innov.strip() or "spatial")


def parse_family(token) -> Family:
    if isinstance(token, Family):
        return token
    tok = str(token).strip()
    for fam in Family:
        if tok in (fam.value, fam.name):
            return fam
    raise ConfigurationError(
        f"unknown model family {token!r}; expected one of {[f.value for f in Family]}"
    )


@dataclass(frozen=True)
class HyperParams:
    """Hyperparameter values. Components a family does not use are ``None``."""

    tau: tuple[float, ...]
    phi: tuple[float, ...] = ()
    kappa: float | None = None
    psi: float | None = None

    def __post_init__(self):
        tau = tuple(float(x) for x in np.atleast_1d(self.tau))
        phi = tuple(float(x) for x in np.atleast_1d(self.phi)) if len(np.atleast_1d(self.phi)) else ()
        if not phi:
            phi = (0.0,) * len(tau)
        if len(phi) != len(tau):
            raise ConfigurationError(f"{len(tau)} tau values but {len(phi)} phi values")
        for x in tau:
            if not np.isfinite(x) or x <= 0:
                raise ParameterDomainError(f"tau must be positive, got {x}")
        for x in phi:
            if not np.isfinite(x) or x < 0:
                raise ParameterDomainError(f"phi must be nonnegative, got {x}")
        if self.kappa is not None and not 0 <= self.kappa < 1:
            raise ParameterDomainError(f"kappa must lie in [0, 1), got {self.kappa}")
        if self.psi is not None and not (np.isfinite(self.psi) and self.psi > 0):
            raise ParameterDomainError(f"psi must be positive, got {self.psi}")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "phi", phi)

    def as_dict(self, spec: SpecId) -> dict[str, float]:
        out = {}
        for name in spec.hyper_names():
            if name.startswith("tau"):
                out[name] = self.tau[int(name[3:]) - 1]
            elif name.startswith("phi"):
                out[name] = self.phi[int(name[3:]) - 1]
            else:
                out[name] = getattr(self, name)
        return out

    @classmethod
    def from_dict(cls, spec: SpecId, values: dict) -> "HyperParams":
        n = spec.family.n_fields
        tau = tuple(values[f"tau{i + 1}"] for i in range(n))
        phi = tuple(values.get(f"phi{i + 1}", 0.0) if spec.spatial else 0.0 for i in range(n))
        return cls(
            tau,
            phi,
            values.get("kappa") if spec.family.has_kappa else None,
            values.get("psi") if spec.family.has_psi else None,
        )


@dataclass(frozen=True, eq=False)
class SystemMatrices:
    """``theta = F' beta``, ``beta_t = G beta_{t-1} + omega``, ``omega ~ N(0, W)``.

    ``F`` is stored as ``p x S`` (the paper's orientation), ``W_inv`` is the
    evolution precision and ``W`` its inverse.
    """

    F: np.ndarray
    G: np.ndarray
    W_inv: np.ndarray
    W: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.W is None:
            object.__setattr__(self, "W", _sym(np.linalg.inv(self.W_inv)))

    @property
    def p(self) -> int:
        return self.G.shape[0]

    @property
    def S(self) -> int:
        return self.F.shape[1]


def _sym(A):
    return 0.5 * (A + A.T)


def latent_dimension(spec: SpecId, S: int) -> int:
    fam = spec.family
    if fam is Family.III:
        return 2 * S
    if fam.has_psi:
        return S + 1
    return S


def contamination_evolution(graph: RegionGraph, kappa: float) -> np.ndarray:
    """``(1 + kappa h)^-1 H`` with ``H = I + kappa * [k in C_l]``, ``h = max_l |C_l|``."""
    if not 0 <= kappa < 1:
        raise ParameterDomainError(f"kappa must lie in [0, 1), got {kappa}")
    S = graph.S
    H = np.eye(S)
    for l, cl in enumerate(graph.across_time_neighbors):
        for k in cl:
            H[k, l] = kappa
    h = max((len(c) for c in graph.across_time_neighbors), default=0)
    return H / (1.0 + kappa * h)


def _field_precision(M: NeighborhoodMatrix, tau: float, phi: float) -> np.ndarray:
    return tau * (np.eye(M.S) + phi * M.M)


def assemble_system(
    spec: SpecId,
    hyper: HyperParams,
    graph: RegionGraph,
    M: NeighborhoodMatrix,
    t: int | None = None,
) -> SystemMatrices:
    """Build ``F``, ``G``, ``W^-1`` (and ``W``) for one family.

    ``t`` is accepted for time-varying designs; all current families are
    time-invariant, so it is ignored.
    """
    fam = spec.family
    S = graph.S
    if len(hyper.tau) != fam.n_fields:
        raise ConfigurationError(f"family {fam.name} needs {fam.n_fields} tau value(s), got {len(hyper.tau)}")
    if fam.has_kappa and hyper.kappa is None:
        raise ConfigurationError(f"family {fam.name} needs kappa")
    if fam.has_psi and hyper.psi is None:
        raise ConfigurationError(f"family {fam.name} needs psi")
    phis = hyper.phi if spec.spatial else (0.0,) * fam.n_fields
    blocks_prec = [_field_precision(M, tau, phi) for tau, phi in zip(hyper.tau, phis)]
    blocks_cov = [pgmrf_covariance(M, tau, phi) for tau, phi in zip(hyper.tau, phis)]

    p = latent_dimension(spec, S)
    F = np.zeros((p, S))
    F[:S] = np.eye(S)
    G = np.zeros((p, p))
    W_inv = np.zeros((p, p))
    W = np.zeros((p, p))
    W_inv[:S, :S] = blocks_prec[0]
    W[:S, :S] = blocks_cov[0]
    G[:S, :S] = contamination_evolution(graph, hyper.kappa) if fam.has_kappa else np.eye(S)
    if fam is Family.III:
        G[:S, S:] = np.eye(S)
        G[S:, S:] = np.eye(S)
        W_inv[S:, S:] = blocks_prec[1]
        W[S:, S:] = blocks_cov[1]
    elif fam.has_psi:
        G[:S, S] = 1.0
        G[S, S] = 1.0
        W_inv[S, S] = hyper.psi
        W[S, S] = 1.0 / hyper.psi
    return SystemMatrices(F, G, _sym(W_inv), _sym(W))


def field_blocks(spec: SpecId, S: int) -> list[slice]:
    """Index slices of the PGMRF-innovation blocks (one per tau)."""
    if spec.family is Family.III:
        return [slice(0, S), slice(S, 2 * S)]
    return [slice(0, S)]
