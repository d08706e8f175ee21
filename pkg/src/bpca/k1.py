"""Rank-one (k = 1) dynamics of CAVI.

At k = 1 the CAVI sweep splits into a direction part, which is power
iteration on XX' (for mu_Z) and X'X (for mu_W), and a two-dimensional
scaling part (a, b) = (||mu_Z||, Sigma_Z) driven by the map Phi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cavi import VariationalState, elbo_0, update_w
from .model import DataMatrix, DimensionError, Hyper, SpectralDecomposition

FP_TOL = 1e-8
C_TOL = 1e-12
NO_FIXED_POINT = "no fixed point; CAVI does not converge"


def _require_k1(hyper: Hyper) -> float:
    if hyper.k != 1:
        raise DimensionError(f"rank-one analysis needs k = 1, got k = {hyper.k}")
    return float(hyper.lambda_diag[0])


@dataclass(frozen=True)
class ScalingState:
    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("scaling state must be finite")
        if self.a < 0 or self.b <= 0:
            raise ValueError(f"need a >= 0 and b > 0, got a={self.a}, b={self.b}")

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b])


def map_f(mu_z, sigma_z: float, data: DataMatrix, hyper: Hyper) -> tuple[np.ndarray, float]:
    """q_Z -> q_W at k = 1."""
    lam = _require_k1(hyper)
    mu_z = np.asarray(mu_z, dtype=float).reshape(-1)
    data.check(hyper)
    if mu_z.shape != (hyper.n,):
        raise DimensionError(f"mu_z must have length {hyper.n}")
    denom = hyper.tau0 * (hyper.n * sigma_z + mu_z @ mu_z) + lam
    return hyper.tau0 * (data.x.T @ mu_z) / denom, 1.0 / denom


def map_g(mu_w, sigma_w: float, data: DataMatrix, hyper: Hyper) -> tuple[np.ndarray, float]:
    """q_W -> q_Z at k = 1."""
    _require_k1(hyper)
    mu_w = np.asarray(mu_w, dtype=float).reshape(-1)
    data.check(hyper)
    if mu_w.shape != (hyper.d,):
        raise DimensionError(f"mu_w must have length {hyper.d}")
    denom = hyper.tau0 * (hyper.d * sigma_w + mu_w @ mu_w) + 1.0
    return hyper.tau0 * (data.x @ mu_w) / denom, 1.0 / denom


def power_iterate(a: np.ndarray, v0, t: int) -> np.ndarray:
    """A^t v0 / ||A^t v0||, normalising after every multiply."""
    a = np.asarray(a, dtype=float)
    v = np.asarray(v0, dtype=float).reshape(-1)
    if t < 0:
        raise ValueError("t must be nonnegative")
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("v0 must be nonzero")
    v = v / norm
    for _ in range(t):
        v = a @ v
        norm = np.linalg.norm(v)
        if norm == 0:
            raise ValueError("A^t v0 vanished; v0 lies in the null space")
        v = v / norm
    return v


@dataclass
class RateBoundReport:
    i_star: int  # zero-based
    rate: float
    c0: float
    c0_prime: float
    sign: float
    coefficients: np.ndarray
    errors_z: dict[int, float] = field(default_factory=dict)
    errors_w: dict[int, float] = field(default_factory=dict)

    def bound_z(self, t: int) -> float:
        return self.c0 * self.rate**t

    def bound_w(self, t: int) -> float:
        return self.c0_prime * self.rate**t

    def to_dict(self) -> dict:
        return {
            "i_star": self.i_star,
            "rate": self.rate,
            "c0": self.c0,
            "c0_prime": self.c0_prime,
            "sign": self.sign,
            "errors_z": {str(t): e for t, e in self.errors_z.items()},
            "errors_w": {str(t): e for t, e in self.errors_w.items()},
        }


def rate_bound_report(spec: SpectralDecomposition, mu_z0, hyper: Hyper) -> RateBoundReport:
    """Constants of the directional convergence bound for a given start mu_Z^(0)."""
    lam = _require_k1(hyper)
    mu_z0 = np.asarray(mu_z0, dtype=float).reshape(-1)
    d = spec.d
    coeffs = spec.eigvecs_left.T @ mu_z0
    tol = C_TOL * np.linalg.norm(mu_z0)
    nonzero = np.flatnonzero(np.abs(coeffs[:d]) > tol)
    if nonzero.size == 0:
        raise ValueError("mu_z0 is orthogonal to every eigenvector with nonzero eigenvalue")
    i_star = int(nonzero[0])
    if i_star >= d - 1:
        raise ValueError(
            f"first nonzero coefficient is at index {i_star + 1} >= d = {d}; "
            "the directional bound does not apply"
        )
    lam_vals = spec.eigvals
    rate = float(lam_vals[i_star + 1] / lam_vals[i_star])
    c_star = abs(coeffs[i_star])
    c0 = float(2 * d * np.max(np.abs(coeffs[:d])) / c_star)
    c0_prime = float(c0 * hyper.tau0 * math.sqrt(lam_vals[0]) / lam)
    return RateBoundReport(
        i_star=i_star,
        rate=rate,
        c0=c0,
        c0_prime=c0_prime,
        sign=float(np.sign(coeffs[i_star])),
        coefficients=coeffs,
    )


def direction_error_bound(
    spec: SpectralDecomposition, mu_z0, t: int, hyper: Hyper
) -> tuple[float, float, RateBoundReport]:
    if t < 2:
        raise ValueError("the bound is stated for t >= 2")
    report = rate_bound_report(spec, mu_z0, hyper)
    return report.bound_z(t), report.bound_w(t), report


def direction_errors(
    states: Sequence[VariationalState], spec: SpectralDecomposition, report: RateBoundReport
) -> RateBoundReport:
    """Fill report.errors_z / errors_w from states[t] = q^(t), t >= 1."""
    target_z = report.sign * spec.eigvecs_left[:, report.i_star]
    target_w = report.sign * spec.eigvecs_right[:, report.i_star]
    for t, s in enumerate(states):
        if t == 0:
            continue
        mz = s.mu_z[:, 0]
        mw = s.mu_w[:, 0]
        report.errors_z[t] = float(np.linalg.norm(mz / np.linalg.norm(mz) - target_z))
        report.errors_w[t] = float(np.linalg.norm(mw / np.linalg.norm(mw) - target_w))
    return report


def _phi_terms(a: float, b: float, lambda1: float, hyper: Hyper) -> tuple[float, float]:
    lam = _require_k1(hyper)
    tau0, n, d = hyper.tau0, hyper.n, hyper.d
    big_l = tau0 * (n * b + a * a) + lam
    denom = d * tau0 * big_l + tau0**3 * a * a * lambda1 + big_l * big_l
    return tau0 * tau0 * a * big_l * lambda1 / denom, big_l * big_l / denom


def map_phi(s: ScalingState, lambda1: float, hyper: Hyper) -> ScalingState:
    """One CAVI sweep of the scaling pair (||mu_Z||, Sigma_Z) along mu_1."""
    if not lambda1 > 0:
        raise ValueError("lambda1 must be positive")
    return ScalingState(*_phi_terms(s.a, s.b, lambda1, hyper))


def _citardauq(c2: float, c1: float, c0: float) -> list[float]:
    """Real roots of c2 u^2 + c1 u + c0 without catastrophic cancellation."""
    disc = c1 * c1 - 4 * c2 * c0
    if disc < 0:
        return []
    sq = math.sqrt(disc)
    q = -0.5 * (c1 + math.copysign(sq, c1))
    if q == 0:  # c1 = 0 and c0 = 0
        return [0.0, 0.0]
    return sorted({q / c2, c0 / q})


def poly_coeffs(lambda1: float, hyper: Hyper) -> tuple[float, float, float]:
    lam = _require_k1(hyper)
    tau0, n, d = hyper.tau0, hyper.n, hyper.d
    m = lambda1 * tau0 - n
    c2 = lambda1 * tau0**2
    c1 = tau0 * (2 * lambda1 * lam + (d - lambda1 * tau0) * m + m * m)
    c0 = lambda1 * lam**2 + (d - lambda1 * tau0) * m * lam
    return c2, c1, c0


def alpha_beta(hyper: Hyper) -> tuple[float, float] | str:
    """Roots of lambda^2 tau0^2 - lambda (Lambda + (d+n) tau0) + dn in lambda."""
    lam = _require_k1(hyper)
    tau0 = hyper.tau0
    roots = _citardauq(tau0**2, -(lam + (hyper.d + hyper.n) * tau0), hyper.d * hyper.n)
    if not roots:
        return "complex"
    return (roots[0], roots[-1])


def jacobian_phi(
    s: ScalingState, lambda1: float, hyper: Hyper, *, stencil: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference Jacobian of Phi and the magnitudes of its eigenvalues.

    ``stencil=2`` is the central difference, ``stencil=4`` the fourth-order one.
    """
    if s.a <= 0:
        raise ValueError("Jacobian is evaluated at strictly positive states")
    x = s.as_array()
    jac = np.empty((2, 2))
    for j in range(2):
        h = 1e-6 * max(1.0, abs(x[j]))
        if stencil == 4 and j == 1 and x[j] - 2 * h <= 0:
            raise ValueError("state too close to b = 0 for the 4-point stencil")

        def f(step):
            y = x.copy()
            y[j] += step
            return np.array(_phi_terms(y[0], y[1], lambda1, hyper))

        if stencil == 2:
            col = (f(h) - f(-h)) / (2 * h)
        elif stencil == 4:
            col = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)
        else:
            raise ValueError("stencil must be 2 or 4")
        jac[:, j] = col
    if not np.all(np.isfinite(jac)):
        raise FloatingPointError("non-finite Phi evaluation in Jacobian")
    return jac, np.abs(np.linalg.eigvals(jac))


def fixed_point_elbo(a: float, b: float, lambda1: float, hyper: Hyper) -> float:
    """elbo_0 at mu_Z = a mu_1, Sigma_Z = b with q_W = F(q_Z).

    Needs only lambda1: every trace reduces to mu_1'X nu_1 = sqrt(lambda1).
    """
    lam = _require_k1(hyper)
    tau0, n, d = hyper.tau0, hyper.n, hyper.d
    big_l = tau0 * (n * b + a * a) + lam
    mw2 = tau0**2 * a * a * lambda1 / big_l**2
    gamma_w = d / big_l + mw2
    gamma_z = n * b + a * a
    return float(
        tau0 * tau0 * a * a * lambda1 / big_l
        - 0.5 * tau0 * gamma_w * gamma_z
        - 0.5 * d * lam / big_l
        - 0.5 * lam * mw2
        - 0.5 * gamma_z
        - 0.5 * d * math.log(big_l)
        + 0.5 * n * math.log(b)
    )


@dataclass
class FixedPointReport:
    lambda1: float
    poly_coeffs: tuple[float, float, float]
    positive_roots_u: list[float]
    candidates: list[ScalingState]
    verified: list[bool]
    jacobian_eigs: list[list[float]]
    elbos: list[float]
    alpha_beta: tuple[float, float] | str
    rejected: list[str] = field(default_factory=list)

    @property
    def status(self) -> str:
        return "ok" if self.candidates else NO_FIXED_POINT

    def best(self) -> ScalingState:
        """Verified candidate with the largest ELBO."""
        pool = [(e, c) for e, c, v in zip(self.elbos, self.candidates, self.verified) if v]
        if not pool:
            raise ValueError(self.status if not self.candidates else "no verified candidate")
        return max(pool, key=lambda p: p[0])[1]

    def to_dict(self) -> dict:
        ab = self.alpha_beta
        return {
            "lambda1": self.lambda1,
            "status": self.status,
            "poly_coeffs": list(self.poly_coeffs),
            "positive_roots_u": list(self.positive_roots_u),
            "candidates": [{"a": c.a, "b": c.b} for c in self.candidates],
            "verified": list(self.verified),
            "jacobian_eigs": self.jacobian_eigs,
            "elbos": list(self.elbos),
            "alpha_beta": ab if isinstance(ab, str) else list(ab),
            "rejected": list(self.rejected),
        }


def solve_fixed_points(lambda1: float, hyper: Hyper, fp_tol: float = FP_TOL) -> FixedPointReport:
    """All fixed points of Phi with a > 0, from the positive roots u = a^2 of P."""
    if not lambda1 > 0:
        raise ValueError("lambda1 must be positive")
    lam = _require_k1(hyper)
    tau0, n = hyper.tau0, hyper.n
    coeffs = poly_coeffs(lambda1, hyper)
    roots = [u for u in _citardauq(*coeffs) if u > 0]
    report = FixedPointReport(
        lambda1=float(lambda1),
        poly_coeffs=coeffs,
        positive_roots_u=roots,
        candidates=[],
        verified=[],
        jacobian_eigs=[],
        elbos=[],
        alpha_beta=alpha_beta(hyper),
    )
    denom = tau0 * tau0 * lambda1 - n * tau0
    for u in roots:
        if denom <= 0:
            report.rejected.append(f"u={u!r}: tau0^2 lambda1 - n tau0 = {denom!r} is not positive")
            continue
        b = (lam + tau0 * u) / denom
        cand = ScalingState(math.sqrt(u), b)
        img = map_phi(cand, lambda1, hyper)
        err = np.max(np.abs(img.as_array() - cand.as_array()) / cand.as_array())
        report.candidates.append(cand)
        report.verified.append(bool(err <= fp_tol))
        report.jacobian_eigs.append(jacobian_phi(cand, lambda1, hyper)[1].tolist())
        report.elbos.append(fixed_point_elbo(cand.a, cand.b, lambda1, hyper))
    return report


def candidate_state(
    cand: ScalingState, spec: SpectralDecomposition, data: DataMatrix, hyper: Hyper
) -> VariationalState:
    """Full variational state at a scaling fixed point: mu_Z = a mu_1, q_W = F(q_Z)."""
    _require_k1(hyper)
    mu_z = cand.a * spec.eigvecs_left[:, :1]
    seed = VariationalState.from_params(np.zeros((hyper.d, 1)), 1.0, mu_z, cand.b)
    return update_w(seed, data, hyper)


def candidate_elbo(
    cand: ScalingState, spec: SpectralDecomposition, data: DataMatrix, hyper: Hyper
) -> float:
    return elbo_0(candidate_state(cand, spec, data, hyper), data, hyper)


def phi_orbit(s: ScalingState, lambda1: float, hyper: Hyper, steps: int) -> list[ScalingState]:
    orbit = [s]
    for _ in range(steps):
        orbit.append(map_phi(orbit[-1], lambda1, hyper))
    return orbit


def scaling_series(states: Sequence[VariationalState]) -> tuple[np.ndarray, np.ndarray]:
    """(a_t, b_t) = (||mu_Z^(t)||, Sigma_Z^(t)) for t >= 1."""
    a = np.array([np.linalg.norm(s.mu_z) for s in states[1:]])
    b = np.array([float(s.sigma_z[0, 0]) for s in states[1:]])
    return a, b
