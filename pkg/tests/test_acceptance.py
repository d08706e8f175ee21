"""Acceptance gate.

Each test records a PASS/FAIL line through ``gate``; the lines are printed
in the terminal summary.  Thresholds are the target values and are not
relaxed to make a criterion pass.
"""

import math
import time
import timeit

import numpy as np
import pytest
from scipy import stats

from bpca.cavi import CaviConfig, elbo_0, iterate_sweeps, run_cavi
from bpca.divergence import (
    check_aux_inequalities,
    delta_exact,
    delta_monte_carlo,
    delta_upper_bound,
    e4_sides,
    kl_lower_bound,
    kl_matrix_normal,
    random_state,
    sample_ball_pair,
    sym_kl,
)
from bpca.k1 import (
    direction_errors,
    jacobian_phi,
    power_iterate,
    rate_bound_report,
    scaling_series,
    solve_fixed_points,
)
from bpca.model import DataMatrix, Hyper, sample_dataset, spectral_decompose
from bpca.stationary import (
    flat_variation,
    newton_refine,
    psi_loss,
    random_orthogonal,
    rotate_state,
)

from conftest import gate

pytestmark = pytest.mark.acceptance

K1 = Hyper(100, 10, 1, 100.0, [1.0])
SEED = 7
GRID_TOL = 1e-12


def _fit_r2(t, y):
    fit = stats.linregress(t, y)
    return fit.slope, fit.rvalue**2


@pytest.fixture(scope="module")
def k1_run():
    data, _ = sample_dataset(K1, seed=SEED)
    spec = spectral_decompose(data)
    tic = time.perf_counter()
    lam1 = float(spec.eigvals[0])
    state, trace = run_cavi(data, K1, CaviConfig(epsilon=1e-15), keep_states=True)
    report = solve_fixed_points(lam1, K1)
    elapsed = time.perf_counter() - tic
    return data, spec, state, trace, report, elapsed


def test_criterion_01_fixed_point_reproduction():
    lam1 = 1098.453
    report = solve_fixed_points(lam1, K1)
    per_call = min(timeit.repeat(lambda: solve_fixed_points(lam1, K1), number=20, repeat=5)) / 20
    star = report.best() if report.candidates else None
    ok = (
        len(report.positive_roots_u) == 1
        and star is not None
        and abs(star.a / 10.039223865837567 - 1) <= 1e-3
        and abs(star.b / 0.0009184540276287452 - 1) <= 1e-3
        and per_call < 1e-3
    )
    gate(
        "1",
        ok,
        f"roots={len(report.positive_roots_u)} a*={star.a:.10g} b*={star.b:.10g} "
        f"verified={report.verified} {per_call * 1e6:.0f} us/call",
    )
    assert ok


def test_criterion_02_self_consistent_fixed_point(k1_run):
    _, _, state, trace, report, elapsed = k1_run
    star = report.best()
    a = float(np.linalg.norm(state.mu_z))
    b = float(state.sigma_z[0, 0])
    err_a, err_b = abs(a - star.a) / star.a, abs(b - star.b) / star.b
    ok = trace.converged and err_a <= 1e-6 and err_b <= 1e-6 and elapsed < 5
    gate(
        "2",
        ok,
        f"{trace.iterations} sweeps, rel err a={err_a:.3g} b={err_b:.3g} (tol 1e-6), {elapsed:.2f} s",
    )
    assert ok


def test_criterion_03_power_iteration(k1_run):
    data, _, _, trace, _, _ = k1_run
    a = data.x @ data.x.T
    v0 = trace.states[0].mu_z[:, 0]
    worst = 0.0
    v = v0 / np.linalg.norm(v0)
    for t, s in enumerate(trace.states[1:], start=1):
        v = a @ v
        v /= np.linalg.norm(v)
        got = s.mu_z[:, 0] / np.linalg.norm(s.mu_z)
        worst = max(worst, float(np.max(np.abs(got - v))))
    # the incremental recursion is power_iterate itself; spot-check the public call
    for t in (1, 7, len(trace.states) - 1):
        ref = power_iterate(a, v0, t)
        got = trace.states[t].mu_z[:, 0] / np.linalg.norm(trace.states[t].mu_z)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    ok = worst <= 1e-10
    gate("3", ok, f"max componentwise error {worst:.3g} over t=1..{len(trace.states) - 1} (tol 1e-10)")
    assert ok


def test_criterion_04_direction_bounds(k1_run):
    data, spec, _, trace, _, _ = k1_run
    report = rate_bound_report(spec, trace.states[0].mu_z[:, 0], K1)
    direction_errors(trace.states, spec, report)
    # a difference of unit n-vectors is not resolvable below sqrt(n) * eps
    floor = math.sqrt(K1.n) * np.finfo(float).eps
    ts = [t for t in report.errors_z if t >= 2]
    over, strict = 0, 0
    slopes = {}
    for name, errs, bound in (
        ("mu_z", report.errors_z, report.bound_z),
        ("mu_w", report.errors_w, report.bound_w),
    ):
        over += sum(errs[t] > max(bound(t), floor) for t in ts)
        strict += sum(errs[t] > bound(t) for t in ts)
        pre = [t for t in ts if errs[t] > floor]
        slopes[name] = stats.linregress(pre, np.log([errs[t] for t in pre])).slope
    target = math.log(report.rate) + 0.05
    ok = over == 0 and all(s <= target for s in slopes.values())
    gate(
        "4",
        ok,
        f"exceedances above max(bound, {floor:.1e}) = {over} (strict, incl. round-off floor: {strict}); "
        f"slopes z={slopes['mu_z']:.3f} w={slopes['mu_w']:.3f} <= {target:.3f}",
    )
    assert ok


def test_criterion_05_scaling_convergence(k1_run):
    data, spec, _, _, report, _ = k1_run
    star = report.best()
    a, b = scaling_series([None] + iterate_sweeps(data, K1, CaviConfig(), 15000))
    details, ok = [], True
    for name, series, ref in (("a", a, star.a), ("b", b, star.b)):
        err = np.abs(series - ref)
        floor = 1e-12 * max(1.0, abs(ref))
        hit = np.flatnonzero(err <= floor)
        stop = int(hit[0]) if hit.size else err.size
        t = np.arange(1, stop + 1)
        slope, r2 = _fit_r2(t, np.log(err[:stop]))
        ok &= r2 > 0.99 and stop >= 10
        details.append(f"{name}: R2={r2:.5f} over {stop} sweeps, slope={slope:.4g}")
    _, mags = jacobian_phi(star, report.lambda1, K1)
    ok &= bool(np.all(mags < 1))
    details.append(f"|eig J|={mags[0]:.6f},{mags[1]:.3g}")
    gate("5", ok, "; ".join(details))
    assert ok


def test_criterion_06_elbo_monotone():
    worst, sweeps = -np.inf, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 4))
        d = k + int(rng.integers(0, 6))
        n = d + int(rng.integers(0, 30))
        hyper = Hyper(n, d, k, float(10 ** rng.uniform(-1, 2)), rng.uniform(0.5, 3, k))
        data, _ = sample_dataset(hyper, seed=seed)
        _, trace = run_cavi(data, hyper, CaviConfig(epsilon=1e-14, max_iters=3000))
        e = trace.elbos()
        drops = (e[:-1] - e[1:]) / (1 + np.abs(e[:-1]))
        worst = max(worst, float(np.max(drops, initial=-np.inf)))
        sweeps += trace.iterations
    ok = worst <= 1e-10
    gate("6", ok, f"worst relative decrease {worst:.3g} over {sweeps} sweeps, 20 seeds (tol 1e-10)")
    assert ok


def test_criterion_07_algebraic_identity():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(200):
        k = 1 + i % 3
        d = k + int(rng.integers(0, 4))
        n = d + int(rng.integers(0, 4))
        hyper = Hyper(n, d, k, float(10 ** rng.uniform(-1, 2)), rng.uniform(0.2, 3, k))
        data = DataMatrix(rng.standard_normal((n, d)))
        s = random_state(rng, n, d, k)
        target = 0.5 * hyper.tau0 * float(np.sum(data.x**2))
        total = psi_loss(s, data, hyper) + elbo_0(s, data, hyper)
        worst = max(worst, abs(total - target) / abs(target))
    ok = worst <= 1e-9
    gate("7", ok, f"max relative residual {worst:.3g} over 200 states, k in 1..3 (tol 1e-9)")
    assert ok


def _small_instance(rng):
    d = int(rng.integers(1, 5))
    n = int(rng.integers(d, 5))
    k = int(rng.integers(1, min(d, 2) + 1))
    hyper = Hyper(n, d, k, float(rng.uniform(0.2, 3)), rng.uniform(0.5, 2, k))
    data = DataMatrix(rng.standard_normal((n, d)))
    return hyper, data, random_state(rng, n, d, k), random_state(rng, n, d, k)


def test_criterion_08_delta_oracles():
    rng = np.random.default_rng(8)
    z_max, mc_ok = 0.0, 0
    for i in range(20):
        hyper, data, a, b = _small_instance(rng)
        exact = delta_exact(a, b, data, hyper)
        est, se = delta_monte_carlo(a, b, data, hyper, 100_000, seed=i)
        z = abs(est - exact) / se
        z_max = max(z_max, z)
        mc_ok += z <= 3
    bound_ok = 0
    for _ in range(1000):
        hyper, data, a, b = _small_instance(rng)
        bound_ok += abs(delta_exact(a, b, data, hyper)) <= delta_upper_bound(a, b, data, hyper) * (1 + 1e-12)
    ok = mc_ok == 20 and bound_ok == 1000
    gate("8", ok, f"MC within 3 SE on {mc_ok}/20 (max |z|={z_max:.2f}); upper bound held {bound_ok}/1000")
    assert ok


def test_criterion_09_kl_lower_bound():
    rng = np.random.default_rng(9)
    viol, viol_quarter, small_viol, small_n = [], 0, 0, 0
    for _ in range(1000):
        rows, k = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        scale = math.exp(rng.uniform(math.log(1e-4), math.log(4.0)))  # 2 r0 / rows
        r0 = scale * rows / 2
        q, q_star = sample_ball_pair(rng, rows, k, r0)
        assert kl_matrix_normal(q_star, q) <= r0
        target = sym_kl(q, q_star)
        bad = kl_lower_bound(q, q_star, r0) > target * (1 + 1e-10) + 1e-14
        viol_quarter += kl_lower_bound(q, q_star, r0, c3=0.25) > target * (1 + 1e-10) + 1e-14
        if bad:
            viol.append(scale)
        if scale < 0.05:
            small_n += 1
            small_viol += bad
    ok = not viol
    gate(
        "9",
        ok,
        f"published constant violated on {len(viol)}/1000 ball pairs "
        f"(smallest 2r0/rows among them {min(viol, default=float('nan')):.3g}); "
        f"2r0/rows<0.05: {small_viol}/{small_n}; covariance constant 1/4: {viol_quarter}/1000",
    )
    assert ok


def test_criterion_10_inequality_kit():
    report = check_aux_inequalities(1000, 3, seed=10)
    lhs, rhs = e4_sides(np.diag([2.0, 1.0]), np.eye(2))
    witness = abs(lhs - 0.5) <= 1e-14 and abs(rhs - 0.5) <= 1e-14
    ok = report.all_passed and witness
    gate("10", ok, f"passes {report.passes} of 1000; E4 witness LHS={lhs:.15g} RHS={rhs:.15g}")
    assert ok


def _grid(lam, k=2):
    hyper = Hyper(4, 3, k, 100.0, lam)
    data, _ = sample_dataset(hyper, seed=0)
    start, _ = run_cavi(data, hyper, CaviConfig(epsilon=1e-15))
    return hyper, data, newton_refine(start, data, hyper, tol=GRID_TOL)


def test_criterion_11_hessian_dichotomy():
    tic = time.perf_counter()
    hyper, data, iso = _grid([1.0, 1.0])
    flat = flat_variation(iso.state, iso.report.flat_direction, data, hyper)
    _, _, aniso = _grid([1.0, 2.0])
    k1 = [_grid([lam], k=1)[2] for lam in (1.0, 2.0)]
    elapsed = time.perf_counter() - tic
    grads = [r.grad_norms[-1] for r in (iso, aniso, *k1)]
    ok = (
        max(grads) <= GRID_TOL
        and iso.report.min_abs_over_max_abs < 1e-8
        and flat <= 1e-8
        and aniso.report.min_abs_over_max_abs > 1e-6
        and not any(r.report.singular_flag for r in k1)
        and elapsed < 30
    )
    gate(
        "11",
        ok,
        f"ratio I={iso.report.min_abs_over_max_abs:.3g} diag(1,2)={aniso.report.min_abs_over_max_abs:.4g} "
        f"k=1: {', '.join(f'{r.report.min_abs_over_max_abs:.3g}' for r in k1)}; flat variation {flat:.3g}; "
        f"max grad {max(grads):.3g}; {elapsed:.1f} s",
    )
    assert ok


def test_criterion_12_rotational_ambiguity():
    hyper, data, res = _grid([2.0, 2.0])
    base = psi_loss(res.state, data, hyper)
    rng = np.random.default_rng(12)
    worst = max(
        abs(psi_loss(rotate_state(res.state, random_orthogonal(rng, 2)), data, hyper) - base) / abs(base)
        for _ in range(20)
    )
    ok = worst <= 1e-10
    gate("12", ok, f"max relative change of Psi0 over 20 rotations {worst:.3g} (tol 1e-10)")
    assert ok


def test_criterion_kl_decay():
    hyper = Hyper(4, 3, 2, 100.0, [1.0, 2.0])
    data, _ = sample_dataset(hyper, seed=0)
    start, trace = run_cavi(data, hyper, CaviConfig(epsilon=1e-15), keep_states=True)
    limit = newton_refine(start, data, hyper, tol=GRID_TOL).state.q_z
    kl = np.array([kl_matrix_normal(s.q_z, limit) for s in trace.states[1:]])
    t = np.flatnonzero(kl > 1e-20) + 1
    slope, r2 = _fit_r2(t, np.log(kl[t - 1]))
    ok = r2 > 0.99
    gate("KL-decay", ok, f"log KL(q_Z^t || limit) linear fit R2={r2:.5f} over {t.size} sweeps, slope={slope:.4g}")
    assert ok
