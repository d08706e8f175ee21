"""Stationary points of the KL loss Psi0 and the local geometry around them.

Psi0 is KL(q || posterior) up to the log-evidence constant, written in the
variational parameters.  Coordinates are (mu_W, upper(Sigma_W), mu_Z,
upper(Sigma_Z)) flattened row-major; a rotation q -> qR acts linearly on
them, which is what makes the Lambda ∝ I flat direction visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cavi import VariationalState, logdet_spd, spd_inverse
from .model import DataMatrix, DimensionError, Hyper

SING_TOL = 1e-8
CLAMP = 1e-12
MAX_HALVINGS = 60


@dataclass(frozen=True)
class FlatLayout:
    d: int
    n: int
    k: int

    @classmethod
    def of(cls, hyper: Hyper) -> "FlatLayout":
        return cls(hyper.d, hyper.n, hyper.k)

    @property
    def tri(self) -> int:
        return self.k * (self.k + 1) // 2

    @property
    def size(self) -> int:
        return (self.d + self.n) * self.k + 2 * self.tri

    def slices(self) -> tuple[slice, slice, slice, slice]:
        a = self.d * self.k
        b = a + self.tri
        c = b + self.n * self.k
        return slice(0, a), slice(a, b), slice(b, c), slice(c, c + self.tri)

    def tri_weights(self) -> np.ndarray:
        """Chain-rule factor per upper-triangle coordinate: 1 on the diagonal, 2 off it."""
        iu = np.triu_indices(self.k)
        return np.where(iu[0] == iu[1], 1.0, 2.0)


def _sym_from_upper(v: np.ndarray, k: int) -> np.ndarray:
    m = np.zeros((k, k))
    iu = np.triu_indices(k)
    m[iu] = v
    return m + np.triu(m, 1).T


def pack(state: VariationalState) -> np.ndarray:
    k = state.q_w.k
    iu = np.triu_indices(k)
    return np.concatenate(
        [state.mu_w.ravel(), state.sigma_w[iu], state.mu_z.ravel(), state.sigma_z[iu]]
    )


def unpack(theta: np.ndarray, layout: FlatLayout) -> VariationalState:
    """Inverse of ``pack``; raises ValueError if a covariance is not PD."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.size,):
        raise DimensionError(f"theta must have length {layout.size}, got {theta.shape}")
    s_mw, s_sw, s_mz, s_sz = layout.slices()
    return VariationalState.from_params(
        theta[s_mw].reshape(layout.d, layout.k),
        _sym_from_upper(theta[s_sw], layout.k),
        theta[s_mz].reshape(layout.n, layout.k),
        _sym_from_upper(theta[s_sz], layout.k),
    )


def psi_loss(state: VariationalState, data: DataMatrix, hyper: Hyper) -> float:
    """Psi0: the KL-to-posterior loss with its additive constant dropped."""
    state.check(hyper)
    data.check(hyper)
    tau0, n, d, lam = hyper.tau0, hyper.n, hyper.d, hyper.lambda_diag
    mw, sw, mz, sz = state.mu_w, state.sigma_w, state.mu_z, state.sigma_z
    resid = data.x - mz @ mw.T
    return float(
        0.5 * tau0 * np.sum(resid * resid)
        + 0.5 * np.sum((mw * mw) * lam)
        + 0.5 * np.sum(mz * mz)
        + 0.5 * d * np.sum(lam * np.diag(sw))
        + 0.5 * n * np.trace(sz)
        + 0.5 * tau0 * d * n * np.sum(sw * sz)
        + 0.5 * tau0 * d * np.sum(sw * (mz.T @ mz))
        + 0.5 * tau0 * n * np.sum((mw.T @ mw) * sz)
        - 0.5 * d * logdet_spd(sw)
        - 0.5 * n * logdet_spd(sz)
    )


def psi_matrix_gradient(
    state: VariationalState, data: DataMatrix, hyper: Hyper
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of Psi0 with respect to (mu_W, Sigma_W, mu_Z, Sigma_Z) as matrices."""
    tau0, n, d = hyper.tau0, hyper.n, hyper.d
    lam = hyper.Lambda
    mw, sw, mz, sz = state.mu_w, state.sigma_w, state.mu_z, state.sigma_z
    x = data.x
    g_mw = -tau0 * x.T @ mz + tau0 * mw @ (mz.T @ mz) + mw @ lam + tau0 * n * mw @ sz
    g_mz = -tau0 * x @ mw + tau0 * mz @ (mw.T @ mw) + mz + tau0 * d * mz @ sw
    g_sw = 0.5 * d * lam + 0.5 * tau0 * d * n * sz + 0.5 * tau0 * d * (mz.T @ mz) - 0.5 * d * spd_inverse(sw)
    g_sz = (
        0.5 * n * np.eye(hyper.k)
        + 0.5 * tau0 * d * n * sw
        + 0.5 * tau0 * n * (mw.T @ mw)
        - 0.5 * n * spd_inverse(sz)
    )
    return g_mw, 0.5 * (g_sw + g_sw.T), g_mz, 0.5 * (g_sz + g_sz.T)


def psi_gradient(theta: np.ndarray, data: DataMatrix, hyper: Hyper) -> np.ndarray:
    """Analytic gradient of Psi0 in flat coordinates."""
    layout = FlatLayout.of(hyper)
    state = unpack(theta, layout)
    g_mw, g_sw, g_mz, g_sz = psi_matrix_gradient(state, data, hyper)
    iu = np.triu_indices(hyper.k)
    w = layout.tri_weights()
    return np.concatenate([g_mw.ravel(), w * g_sw[iu], g_mz.ravel(), w * g_sz[iu]])


def _psi_theta(theta: np.ndarray, data: DataMatrix, hyper: Hyper) -> float:
    return psi_loss(unpack(theta, FlatLayout.of(hyper)), data, hyper)


@dataclass
class HessianReport:
    eigvals: np.ndarray
    eigvecs: np.ndarray
    grad_norm_at_point: float
    sing_tol: float = SING_TOL

    @property
    def min_abs_over_max_abs(self) -> float:
        a = np.abs(self.eigvals)
        return float(a.min() / a.max())

    @property
    def singular_flag(self) -> bool:
        return self.min_abs_over_max_abs < self.sing_tol

    @property
    def flat_direction(self) -> np.ndarray:
        return self.eigvecs[:, int(np.argmin(np.abs(self.eigvals)))]

    def to_dict(self) -> dict:
        return {
            "eigvals": self.eigvals.tolist(),
            "min_abs_over_max_abs": self.min_abs_over_max_abs,
            "singular_flag": self.singular_flag,
            "grad_norm_at_point": self.grad_norm_at_point,
            "sing_tol": self.sing_tol,
        }


def fd_hessian(theta: np.ndarray, data: DataMatrix, hyper: Hyper) -> np.ndarray:
    """Central differences of the analytic gradient, h = 1e-5 (1 + |theta_i|), symmetrised."""
    theta = np.asarray(theta, dtype=float)
    m = theta.size
    hess = np.empty((m, m))
    for i in range(m):
        h = 1e-5 * (1.0 + abs(theta[i]))
        # keep covariance coordinates PD by shrinking the step if needed
        for _ in range(30):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            try:
                g_up = psi_gradient(up, data, hyper)
                g_dn = psi_gradient(dn, data, hyper)
                break
            except (ValueError, np.linalg.LinAlgError):
                h *= 0.5
        else:
            raise FloatingPointError(f"cannot take a PD-preserving step in coordinate {i}")
        hess[:, i] = (g_up - g_dn) / (2 * h)
    if not np.all(np.isfinite(hess)):
        raise FloatingPointError("non-finite Hessian entry")
    return 0.5 * (hess + hess.T)


def hessian_spectrum(
    state: VariationalState, data: DataMatrix, hyper: Hyper, sing_tol: float = SING_TOL
) -> HessianReport:
    theta = pack(state)
    hess = fd_hessian(theta, data, hyper)
    vals, vecs = np.linalg.eigh(hess)
    grad = psi_gradient(theta, data, hyper)
    return HessianReport(
        eigvals=vals,
        eigvecs=vecs,
        grad_norm_at_point=float(np.max(np.abs(grad))),
        sing_tol=sing_tol,
    )


@dataclass
class NewtonResult:
    state: VariationalState
    report: HessianReport
    iterations: int
    grad_norms: list[float]


def default_tol(state: VariationalState, data: DataMatrix, hyper: Hyper) -> float:
    return 1e-12 * (1.0 + abs(psi_loss(state, data, hyper)))


def newton_refine(
    start: VariationalState,
    data: DataMatrix,
    hyper: Hyper,
    tol: float | None = None,
    max_iters: int = 100,
) -> NewtonResult:
    """Damped Newton on Psi0 until the sup-norm of the gradient is <= tol.

    The step uses a pseudo-inverse: Hessian eigenvalues below CLAMP * max|eig|
    are dropped so the flat rotation direction cannot blow the step up.
    Steps are halved until Psi0 does not increase (beyond round-off) and both
    covariances stay PD.
    """
    tol = default_tol(start, data, hyper) if tol is None else tol
    if not tol > 0:
        raise ValueError("tol must be positive")
    layout = FlatLayout.of(hyper)
    theta = pack(start)
    grad = psi_gradient(theta, data, hyper)
    psi = _psi_theta(theta, data, hyper)
    norms = [float(np.max(np.abs(grad)))]
    it = 0
    while norms[-1] > tol:
        if it >= max_iters:
            raise RuntimeError(f"Newton did not reach tol={tol:g} in {max_iters} iterations")
        vals, vecs = np.linalg.eigh(fd_hessian(theta, data, hyper))
        keep = np.abs(vals) > CLAMP * np.max(np.abs(vals))
        step = -vecs[:, keep] @ ((vecs[:, keep].T @ grad) / vals[keep])
        slack = 8 * np.finfo(float).eps * (1.0 + abs(psi))
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = theta + t * step
            try:
                psi_new = _psi_theta(cand, data, hyper)
            except (ValueError, np.linalg.LinAlgError):
                psi_new = math.inf
            if psi_new <= psi + slack:
                break
            t *= 0.5
        else:
            raise RuntimeError("line search failed after 60 halvings")
        theta, psi = cand, psi_new
        grad = psi_gradient(theta, data, hyper)
        norms.append(float(np.max(np.abs(grad))))
        it += 1
    state = unpack(theta, layout)
    return NewtonResult(state, hessian_spectrum(state, data, hyper), it, norms)


def rotate_state(state: VariationalState, r: np.ndarray, atol: float = 1e-10) -> VariationalState:
    """q R = (mu_W R, R' Sigma_W R, mu_Z R, R' Sigma_Z R)."""
    r = np.asarray(r, dtype=float)
    k = state.q_w.k
    if r.shape != (k, k):
        raise DimensionError(f"rotation must be {k}x{k}")
    if np.max(np.abs(r.T @ r - np.eye(k))) > atol:
        raise ValueError("matrix is not orthogonal")
    sw = r.T @ state.sigma_w @ r
    sz = r.T @ state.sigma_z @ r
    return VariationalState.from_params(
        state.mu_w @ r, 0.5 * (sw + sw.T), state.mu_z @ r, 0.5 * (sz + sz.T)
    )


def random_orthogonal(rng: np.random.Generator, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


def flat_variation(
    state: VariationalState,
    direction: np.ndarray,
    data: DataMatrix,
    hyper: Hyper,
    alpha_max: float = 1e-3,
    points: int = 21,
) -> float:
    """max |Psi0(theta + alpha v) - Psi0(theta)| over |alpha| <= alpha_max."""
    theta = pack(state)
    base = _psi_theta(theta, data, hyper)
    v = direction / np.linalg.norm(direction)
    return max(
        abs(_psi_theta(theta + a * v, data, hyper) - base)
        for a in np.linspace(-alpha_max, alpha_max, points)
    )
