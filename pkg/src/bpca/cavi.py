"""Coordinate ascent updates for the mean-field Bayesian PCA posterior.

The variational family is q(W) q(Z) with both factors matrix normal,
N(mu_W, I_d x Sigma_W) and N(mu_Z, I_n x Sigma_Z).  Each block update is
the exact minimiser of KL(q || posterior) with the other block held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .model import DataMatrix, DimensionError, Hyper

SYM_TOL = 1e-12


class NumericalAbort(RuntimeError):
    """CAVI produced a non-finite quantity."""


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def spd_inverse(m: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky."""
    try:
        c = linalg.cho_factor(m, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"update matrix is not positive definite: {exc}") from exc
    inv = linalg.cho_solve(c, np.eye(m.shape[0]))
    return _symmetrize(inv)


def logdet_spd(m: np.ndarray) -> float:
    try:
        c = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance is not positive definite") from exc
    return float(2.0 * np.sum(np.log(np.diag(c))))


@dataclass(frozen=True)
class MatrixNormal:
    """N(mean, I_rows x row_cov): independent rows sharing a k x k covariance."""

    mean: np.ndarray
    row_cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        if mean.ndim == 1:
            mean = mean[:, None]
        cov = np.array(self.row_cov, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        if mean.ndim != 2 or cov.shape != (mean.shape[1], mean.shape[1]):
            raise DimensionError(f"mean {mean.shape} and row_cov {cov.shape} disagree")
        if np.max(np.abs(cov - cov.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(cov))):
            raise ValueError("row_cov is not symmetric")
        cov = _symmetrize(cov)
        if not np.all(np.isfinite(cov)) or np.min(np.linalg.eigvalsh(cov)) <= 0:
            raise ValueError("row_cov is not positive definite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "row_cov", cov)

    @property
    def rows(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.mean.shape[1]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` matrices, shape (size, rows, k)."""
        chol = np.linalg.cholesky(self.row_cov)
        xi = rng.standard_normal((size, self.rows, self.k))
        return self.mean + xi @ chol.T


@dataclass(frozen=True)
class VariationalState:
    q_w: MatrixNormal
    q_z: MatrixNormal

    def __post_init__(self):
        if self.q_w.k != self.q_z.k:
            raise DimensionError("q_w and q_z disagree on k")

    @classmethod
    def from_params(cls, mu_w, sigma_w, mu_z, sigma_z) -> "VariationalState":
        return cls(MatrixNormal(mu_w, sigma_w), MatrixNormal(mu_z, sigma_z))

    @property
    def mu_w(self) -> np.ndarray:
        return self.q_w.mean

    @property
    def sigma_w(self) -> np.ndarray:
        return self.q_w.row_cov

    @property
    def mu_z(self) -> np.ndarray:
        return self.q_z.mean

    @property
    def sigma_z(self) -> np.ndarray:
        return self.q_z.row_cov

    def check(self, hyper: Hyper) -> None:
        if self.mu_w.shape != (hyper.d, hyper.k) or self.mu_z.shape != (hyper.n, hyper.k):
            raise DimensionError(
                f"state shapes mu_w {self.mu_w.shape}, mu_z {self.mu_z.shape} "
                f"do not match d={hyper.d}, n={hyper.n}, k={hyper.k}"
            )

    def to_dict(self) -> dict:
        return {
            "mu_w": self.mu_w.tolist(),
            "sigma_w": self.sigma_w.tolist(),
            "mu_z": self.mu_z.tolist(),
            "sigma_z": self.sigma_z.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "VariationalState":
        return cls.from_params(
            payload["mu_w"], payload["sigma_w"], payload["mu_z"], payload["sigma_z"]
        )


@dataclass(frozen=True)
class CaviConfig:
    epsilon: float = 1e-15
    max_iters: int = 100_000
    mu_z0: np.ndarray | None = None
    sigma_z0: np.ndarray | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.mu_z0 is not None:
            mu = np.asarray(self.mu_z0, dtype=float)
            if not np.any(mu != 0):
                raise ValueError("mu_z0 = 0 is the trivial fixed point of CAVI; use a nonzero start")

    def initial_state(self, hyper: Hyper) -> MatrixNormal:
        """q_Z^(0); defaults to entries 0.1 and identity covariance."""
        mu = self.mu_z0 if self.mu_z0 is not None else np.full((hyper.n, hyper.k), 0.1)
        sigma = self.sigma_z0 if self.sigma_z0 is not None else np.eye(hyper.k)
        q = MatrixNormal(mu, sigma)
        if q.mean.shape != (hyper.n, hyper.k):
            raise DimensionError(f"mu_z0 must be {hyper.n}x{hyper.k}, got {q.mean.shape}")
        return q


@dataclass
class TraceRecord:
    t: int
    elbo: float
    delta_rel: float | None
    mu_z_norm: float
    mu_w_norm: float
    sigma_z_norm: float
    sigma_w_norm: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "elbo": self.elbo,
            "delta_rel": self.delta_rel,
            "mu_z_norm": self.mu_z_norm,
            "mu_w_norm": self.mu_w_norm,
            "sigma_z_norm": self.sigma_z_norm,
            "sigma_w_norm": self.sigma_w_norm,
        }


@dataclass
class TraceLog:
    records: list[TraceRecord] = field(default_factory=list)
    status: str = "running"
    iterations: int = 0
    # states[t] is q^(t); states[0] carries a placeholder q_W (q_W^(0) is undefined)
    states: list[VariationalState] | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def elbos(self) -> np.ndarray:
        return np.array([r.elbo for r in self.records])


def _check_inputs(state: VariationalState, data: DataMatrix, hyper: Hyper) -> None:
    data.check(hyper)
    state.check(hyper)


def _finite_block(mean: np.ndarray, cov: np.ndarray, block: str) -> MatrixNormal:
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise NumericalAbort(f"non-finite q_{block} update")
    return MatrixNormal(mean, cov)


def update_w(state: VariationalState, data: DataMatrix, hyper: Hyper) -> VariationalState:
    """Exact q_W update given q_Z."""
    _check_inputs(state, data, hyper)
    mu_z, sigma_z = state.mu_z, state.sigma_z
    precision = hyper.tau0 * (hyper.n * sigma_z + mu_z.T @ mu_z) + hyper.Lambda
    sigma_w = spd_inverse(_symmetrize(precision))
    mu_w = (hyper.tau0 * data.x.T @ mu_z) @ sigma_w
    return replace(state, q_w=_finite_block(mu_w, sigma_w, "W"))


def update_z(state: VariationalState, data: DataMatrix, hyper: Hyper) -> VariationalState:
    """Exact q_Z update given q_W."""
    _check_inputs(state, data, hyper)
    mu_w, sigma_w = state.mu_w, state.sigma_w
    precision = hyper.tau0 * (hyper.d * sigma_w + mu_w.T @ mu_w) + np.eye(hyper.k)
    sigma_z = spd_inverse(_symmetrize(precision))
    mu_z = (hyper.tau0 * data.x @ mu_w) @ sigma_z
    return replace(state, q_z=_finite_block(mu_z, sigma_z, "Z"))


def moments(state: VariationalState) -> tuple[np.ndarray, np.ndarray]:
    """Second moments Gamma_W = d Sigma_W + mu_W'mu_W and Gamma_Z = n Sigma_Z + mu_Z'mu_Z."""
    d, n = state.q_w.rows, state.q_z.rows
    gamma_w = d * state.sigma_w + state.mu_w.T @ state.mu_w
    gamma_z = n * state.sigma_z + state.mu_z.T @ state.mu_z
    return gamma_w, gamma_z


def elbo_0(state: VariationalState, data: DataMatrix, hyper: Hyper) -> float:
    """ELBO with its additive constant set to zero."""
    _check_inputs(state, data, hyper)
    tau0, d, n = hyper.tau0, hyper.d, hyper.n
    mu_w, mu_z = state.mu_w, state.mu_z
    gamma_w, gamma_z = moments(state)
    lam = hyper.lambda_diag
    return float(
        tau0 * np.sum((data.x.T @ mu_z) * mu_w)
        - 0.5 * tau0 * np.sum(gamma_w * gamma_z.T)
        - 0.5 * d * np.sum(lam * np.diag(state.sigma_w))
        - 0.5 * np.sum((mu_w * mu_w) * lam)
        - 0.5 * np.trace(gamma_z)
        + 0.5 * d * logdet_spd(state.sigma_w)
        + 0.5 * n * logdet_spd(state.sigma_z)
    )


def _record(t: int, state: VariationalState, elbo: float, delta: float | None) -> TraceRecord:
    return TraceRecord(
        t=t,
        elbo=elbo,
        delta_rel=delta,
        mu_z_norm=float(np.linalg.norm(state.mu_z)),
        mu_w_norm=float(np.linalg.norm(state.mu_w)),
        sigma_z_norm=float(np.linalg.norm(state.sigma_z)),
        sigma_w_norm=float(np.linalg.norm(state.sigma_w)),
    )


def iterate_sweeps(
    data: DataMatrix, hyper: Hyper, config: CaviConfig | None = None, sweeps: int = 1
) -> list[VariationalState]:
    """q^(1), ..., q^(sweeps) with no stopping rule, for studying the raw dynamics."""
    config = config or CaviConfig()
    data.check(hyper)
    state = VariationalState(
        MatrixNormal(np.zeros((hyper.d, hyper.k)), np.eye(hyper.k)), config.initial_state(hyper)
    )
    out = []
    for _ in range(sweeps):
        state = update_z(update_w(state, data, hyper), data, hyper)
        out.append(state)
    return out


def run_cavi(
    data: DataMatrix,
    hyper: Hyper,
    config: CaviConfig | None = None,
    *,
    keep_states: bool = False,
) -> tuple[VariationalState, TraceLog]:
    """Alternate update_w / update_z until the relative ELBO increase drops to epsilon.

    The relative increase is (ELBO_new - ELBO_old) / (|ELBO_old| + 1), which
    stays well defined when the ELBO is negative or crosses zero.
    """
    config = config or CaviConfig()
    data.check(hyper)
    q_z0 = config.initial_state(hyper)
    # placeholder q_W so the state type is complete; it is overwritten by the first sweep
    state = VariationalState(MatrixNormal(np.zeros((hyper.d, hyper.k)), np.eye(hyper.k)), q_z0)
    log = TraceLog(states=[state] if keep_states else None)

    prev = None
    for t in range(1, config.max_iters + 1):
        state = update_z(update_w(state, data, hyper), data, hyper)
        elbo = elbo_0(state, data, hyper)
        if not math.isfinite(elbo):
            log.status = "aborted"
            raise NumericalAbort(f"non-finite ELBO at sweep {t}: {elbo}")
        delta = None if prev is None else (elbo - prev) / (abs(prev) + 1.0)
        log.records.append(_record(t, state, elbo, delta))
        if keep_states:
            log.states.append(state)
        log.iterations = t
        if delta is not None and delta <= config.epsilon:
            log.status = "converged"
            return state, log
        prev = elbo
    log.status = "max_iters"
    return state, log
