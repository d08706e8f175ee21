"""``bpca`` command line: simulate, fit, analyze-k1, gcorr, stationary, verify.

Every command takes ``--config <json>`` and ``--out <dir>``.  When ``--out``
is omitted the directory is ``$BPCA_OUT_ROOT/<name>`` (default root
``./bpca-out``).  Exit codes: 0 ok, 2 bad config or input, 3 numerical
abort, 4 property-suite failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import io as bio
from .cavi import NumericalAbort, VariationalState, elbo_0, iterate_sweeps, run_cavi
from .divergence import gcorr_condition, property_suites
from .k1 import direction_errors, rate_bound_report, scaling_series, solve_fixed_points
from .model import DimensionError, default_w0, sample_dataset, spectral_decompose
from .stationary import hessian_spectrum, newton_refine

log = logging.getLogger("bpca")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_SUITE = 0, 2, 3, 4
OUT_ROOT_ENV = "BPCA_OUT_ROOT"


def _metadata() -> dict:
    return {"created": datetime.now(timezone.utc).isoformat(), "version": __version__}


def _load_data(cfg: dict, out: Path, hyper):
    path = Path(cfg["data"]) if "data" in cfg else out / "X.csv"
    data = bio.read_matrix_csv(path)
    try:
        data.check(hyper)
    except DimensionError as exc:
        raise bio.ConfigError(f"{path}: {exc}") from exc
    return data


def _fit(cfg: dict, out: Path, keep_states: bool = False):
    hyper = bio.hyper_from_config(cfg)
    data = _load_data(cfg, out, hyper)
    state, trace = run_cavi(data, hyper, bio.cavi_config_from(cfg, hyper), keep_states=keep_states)
    return hyper, data, state, trace


def cmd_simulate(cfg: dict, out: Path) -> int:
    hyper = bio.hyper_from_config(cfg)
    w0 = cfg.get("w0", "ones")
    w0 = default_w0(hyper.d, hyper.k) if w0 == "ones" else np.asarray(w0, dtype=float)
    try:
        data, draw = sample_dataset(hyper, w0, seed=cfg["seed"])
    except (DimensionError, ValueError) as exc:
        raise bio.ConfigError(str(exc)) from exc
    bio.write_matrix_csv(out / "X.csv", data.x)
    sidecar = {
        "seed": draw.seed,
        "w0": draw.w0,
        "dims": {"n": hyper.n, "d": hyper.d, "k": hyper.k},
        "tau0": hyper.tau0,
        "metadata": _metadata(),
    }
    bio.write_json(out / "generative.json", sidecar, schema="generative")
    log.info("wrote %s (%d x %d)", out / "X.csv", hyper.n, hyper.d)
    return EXIT_OK


def cmd_fit(cfg: dict, out: Path) -> int:
    hyper, data, state, trace = _fit(cfg, out)
    records = []
    for r in trace.records:
        rec = {k: v for k, v in r.to_dict().items() if k in ("t", "elbo", "delta_rel", "mu_z_norm", "mu_w_norm")}
        bio.validate(rec, "trace_record")
        records.append(rec)
    bio.write_jsonl(out / "trace.jsonl", records)
    result = {
        "status": trace.status,
        "iterations": trace.iterations,
        "elbo": trace.records[-1].elbo,
        "mu_z_norm": float(np.linalg.norm(state.mu_z)),
        "state": state.to_dict(),
        "metadata": _metadata(),
    }
    bio.write_json(out / "fit.json", result, schema="fit_result")
    log.info("%s after %d sweeps, elbo_0 = %.17g", trace.status, trace.iterations, result["elbo"])
    return EXIT_OK


def cmd_analyze_k1(cfg: dict, out: Path) -> int:
    if cfg["dims"]["k"] != 1:
        raise bio.ConfigError("analyze-k1 needs k = 1")
    hyper, data, state, trace = _fit(cfg, out, keep_states=True)
    spec = spectral_decompose(data)
    report = solve_fixed_points(float(spec.eigvals[0]), hyper)
    bio.write_json(out / "fixed_points.json", {**report.to_dict(), "metadata": _metadata()}, schema="fixed_points")

    mu_z0 = trace.states[0].mu_z[:, 0]
    bounds = direction_errors(trace.states, spec, rate_bound_report(spec, mu_z0, hyper))
    rows = []
    for t in sorted(t for t in bounds.errors_z if t >= 2):
        rows.append((t, "mu_z", bounds.errors_z[t], bounds.bound_z(t)))
        rows.append((t, "mu_w", bounds.errors_w[t], bounds.bound_w(t)))
    bio.write_series_csv(out / "figure1_direction.csv", ("t", "series", "observed", "bound"), rows)

    if report.candidates:
        star = report.best()
        horizon = cfg.get("horizon", trace.iterations)
        states = [None] + iterate_sweeps(data, hyper, bio.cavi_config_from(cfg, hyper), horizon)
        a, b = scaling_series(states)
        rows = []
        for t in range(1, horizon + 1):
            rows.append((t, "a", abs(a[t - 1] - star.a)))
            rows.append((t, "b", abs(b[t - 1] - star.b)))
        bio.write_series_csv(out / "figure2_scaling.csv", ("t", "series", "abs_error"), rows)
    log.info("fixed points: %s", report.status)
    return EXIT_OK


def _refined(cfg: dict, out: Path):
    hyper = bio.hyper_from_config(cfg)
    data = _load_data(cfg, out, hyper)
    if "state" in cfg:
        payload = bio.read_json(Path(cfg["state"]))
        start = VariationalState.from_dict(payload.get("state", payload))
        start.check(hyper)
    else:
        start, _ = run_cavi(data, hyper, bio.cavi_config_from(cfg, hyper))
    return hyper, data, newton_refine(start, data, hyper)


def cmd_gcorr(cfg: dict, out: Path) -> int:
    hyper, data, res = _refined(cfg, out)
    report = gcorr_condition(res.state, data, hyper)
    bio.write_json(out / "gcorr.json", {**report.to_dict(), "metadata": _metadata()}, schema="gcorr_report")
    idx, val = report.max_term
    log.info("max term %d = %.6g, satisfied = %s", idx, val, report.satisfied)
    return EXIT_OK


def cmd_stationary(cfg: dict, out: Path) -> int:
    hyper, data, res = _refined(cfg, out)
    report = hessian_spectrum(res.state, data, hyper)
    payload = {
        **report.to_dict(),
        "newton_iterations": res.iterations,
        "psi0_elbo_check": elbo_0(res.state, data, hyper),
        "state": res.state.to_dict(),
        "metadata": _metadata(),
    }
    bio.write_json(out / "hessian.json", payload, schema="hessian")
    bio.write_series_csv(
        out / "hessian_eigs.csv", ("index", "eigval"), enumerate(float(v) for v in report.eigvals)
    )
    log.info("min/max |eig| = %.3e, singular = %s", report.min_abs_over_max_abs, report.singular_flag)
    return EXIT_OK


def cmd_verify(cfg: dict, out: Path) -> int:
    result = property_suites(cfg.get("trials", 1000), cfg.get("dim", 3), cfg.get("seed", 0))
    bio.write_json(out / "verify.json", {**result, "metadata": _metadata()}, schema="verify_result")
    for name, suite in result["suites"].items():
        log.info("%s: %s", name, "pass" if suite["all_passed"] else "FAIL")
    return EXIT_OK if result["all_passed"] else EXIT_SUITE


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "analyze-k1": cmd_analyze_k1,
    "gcorr": cmd_gcorr,
    "stationary": cmd_stationary,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpca", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ROOT_ENV}/<name>)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
    )
    try:
        cfg = bio.load_config(args.config, args.command)
        out = args.out or Path(os.environ.get(OUT_ROOT_ENV, "bpca-out")) / cfg["name"]
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except bio.ConfigError as exc:
        print(f"bpca {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"bpca {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
