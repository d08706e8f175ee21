"""Bayesian PCA generative model: hyperparameters, simulation, log posterior
and the spectral decomposition of the data used by the rank-one analysis."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np

RANK_TOL = 1e-10
GAP_TOL = 1e-9


class DimensionError(ValueError):
    """Raised when array shapes disagree with the hyperparameters."""


class RankDeficientError(ValueError):
    pass


class NearTieWarning(UserWarning):
    """Eigenvalues of XX' are not separated; rate bounds are unreliable."""


@dataclass(frozen=True)
class Hyper:
    n: int
    d: int
    k: int
    tau0: float
    lambda_diag: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        lam = self.lambda_diag
        if lam is None:
            lam = np.ones(self.k)
        lam = np.atleast_1d(np.asarray(lam, dtype=float)).copy()
        lam.setflags(write=False)
        object.__setattr__(self, "lambda_diag", lam)
        if not (self.n >= self.d >= self.k >= 1):
            raise ValueError(f"need n >= d >= k >= 1, got n={self.n}, d={self.d}, k={self.k}")
        if not (np.isfinite(self.tau0) and self.tau0 > 0):
            raise ValueError(f"tau0 must be positive, got {self.tau0}")
        if lam.shape != (self.k,):
            raise DimensionError(f"lambda_diag must have length k={self.k}, got {lam.shape}")
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise ValueError("lambda_diag entries must be positive")

    @property
    def Lambda(self) -> np.ndarray:
        return np.diag(self.lambda_diag)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "d": self.d,
            "k": self.k,
            "tau0": float(self.tau0),
            "lambda_diag": [float(v) for v in self.lambda_diag],
        }


@dataclass(frozen=True)
class DataMatrix:
    """Observed n x d matrix. ``provenance`` records how it was obtained,
    e.g. ``{"kind": "simulated", "seed": 7}`` or ``{"kind": "loaded", "path": ...}``."""

    x: np.ndarray
    provenance: dict = field(default_factory=lambda: {"kind": "in-memory"})

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim != 2:
            raise DimensionError(f"data must be a matrix, got ndim={x.ndim}")
        if not np.all(np.isfinite(x)):
            raise ValueError("data contains non-finite entries")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def check(self, hyper: Hyper) -> None:
        if self.x.shape != (hyper.n, hyper.d):
            raise DimensionError(f"data shape {self.x.shape} != ({hyper.n}, {hyper.d})")

    def is_full_rank(self, rank_tol: float = RANK_TOL) -> bool:
        s = np.linalg.svd(self.x, compute_uv=False)
        return bool(s[-1] > rank_tol * s[0])


@dataclass(frozen=True)
class GenerativeDraw:
    w0: np.ndarray
    z0: np.ndarray
    e: np.ndarray
    seed: int


@dataclass(frozen=True)
class SpectralDecomposition:
    eigvals: np.ndarray  # length n, nonincreasing, zeros past d
    eigvecs_left: np.ndarray  # n x n, columns mu_i
    eigvecs_right: np.ndarray  # d x d, columns nu_i
    distinct: bool = True

    @property
    def d(self) -> int:
        return self.eigvecs_right.shape[0]

    @property
    def gaps(self) -> np.ndarray:
        lam = self.eigvals[: self.d]
        return lam[:-1] - lam[1:]


def default_w0(d: int, k: int) -> np.ndarray:
    """All-ones loading matrix, the choice used in the reference experiments."""
    return np.ones((d, k))


def sample_dataset(
    hyper: Hyper,
    w0: np.ndarray | None = None,
    seed: int = 0,
    *,
    noiseless: bool = False,
) -> tuple[DataMatrix, GenerativeDraw]:
    """Draw X = Z0 W0' + E with standard-normal Z0 and noise of precision tau0.

    ``noiseless=True`` zeroes E (the tau0 -> infinity limit) but still
    consumes the same random stream so Z0 matches the noisy draw.
    """
    if w0 is None:
        w0 = default_w0(hyper.d, hyper.k)
    w0 = np.asarray(w0, dtype=float)
    if w0.ndim == 1 and hyper.k == 1:
        w0 = w0[:, None]
    if w0.shape != (hyper.d, hyper.k):
        raise DimensionError(f"w0 must be {hyper.d}x{hyper.k}, got {w0.shape}")
    if not np.all(np.isfinite(w0)):
        raise ValueError("w0 contains non-finite entries")

    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((hyper.n, hyper.k))
    e = rng.standard_normal((hyper.n, hyper.d)) / np.sqrt(hyper.tau0)
    if noiseless:
        e = np.zeros_like(e)
    x = z0 @ w0.T + e
    data = DataMatrix(x, {"kind": "simulated", "seed": int(seed)})
    return data, GenerativeDraw(w0=w0, z0=z0, e=e, seed=int(seed))


def log_posterior_unnorm(w: np.ndarray, z: np.ndarray, data: DataMatrix, hyper: Hyper) -> float:
    """Log posterior of (W, Z) up to an additive constant (dropped)."""
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    data.check(hyper)
    if w.shape != (hyper.d, hyper.k) or z.shape != (hyper.n, hyper.k):
        raise DimensionError(f"w {w.shape} / z {z.shape} inconsistent with hyper")
    x = data.x
    tau0 = hyper.tau0
    wzt = w @ z.T  # d x n
    zw = z @ w.T  # n x d
    return float(
        tau0 * np.trace(wzt @ x)
        - 0.5 * tau0 * np.sum(zw * zw)
        - 0.5 * np.sum((w * w) * hyper.lambda_diag)
        - 0.5 * np.sum(z * z)
    )


def spectral_decompose(
    data: DataMatrix, rank_tol: float = RANK_TOL, gap_tol: float = GAP_TOL
) -> SpectralDecomposition:
    """Eigenpairs of XX' and X'X from a full SVD of X.

    Each left eigenvector is flipped so its largest-magnitude entry is
    positive; the matching right eigenvector is flipped with it so that
    X' mu_i = sqrt(lambda_i) nu_i.
    """
    x = data.x
    n, d = x.shape
    if n < d:
        raise DimensionError(f"need n >= d, got {x.shape}")
    u, s, vt = np.linalg.svd(x, full_matrices=True)
    if not s[-1] > rank_tol * s[0]:
        raise RankDeficientError(
            f"smallest singular value {s[-1]:.3e} <= {rank_tol:g} * largest {s[0]:.3e}"
        )
    v = vt.T.copy()
    u = u.copy()
    for i in range(n):
        j = np.argmax(np.abs(u[:, i]))
        if u[j, i] < 0:
            u[:, i] = -u[:, i]
            if i < d:
                v[:, i] = -v[:, i]
    eigvals = np.zeros(n)
    eigvals[:d] = s**2

    gaps = eigvals[: d - 1] - eigvals[1:d]
    distinct = bool(np.all(gaps > gap_tol * eigvals[0]))
    if not distinct:
        warnings.warn(
            "eigenvalues of XX' are not distinct to relative gap "
            f"{gap_tol:g}; directional rate bounds are unreliable",
            NearTieWarning,
            stacklevel=2,
        )
    return SpectralDecomposition(eigvals=eigvals, eigvecs_left=u, eigvecs_right=v, distinct=distinct)
