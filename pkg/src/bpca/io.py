"""File formats: headerless matrix CSV, tidy series CSV, JSON and JSONL.

Floats are written with 17 significant digits so every value round-trips
exactly.  JSON outputs are validated against the schemas in ``SCHEMAS``.
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path
from typing import Any, Iterable, Sequence

import jsonschema
import numpy as np

from .cavi import CaviConfig
from .model import DataMatrix, Hyper


class ConfigError(ValueError):
    """Configuration or input file rejected before any computation."""


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def plain(obj: Any) -> Any:
    """Recursively convert numpy containers and scalars to built-in types."""
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    return obj


def _to_json(obj: Any, indent: int | None, level: int) -> str:
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"cannot serialise non-finite float {obj!r}")
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        parts = [f"{json.dumps(k)}: {_to_json(v, indent, level + 1)}" for k, v in obj.items()]
    elif isinstance(obj, list):
        parts = [_to_json(v, indent, level + 1) for v in obj]
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")
    opener, closer = ("{", "}") if isinstance(obj, dict) else ("[", "]")
    if not parts:
        return opener + closer
    flat = isinstance(obj, list) and all(not isinstance(v, (dict, list)) for v in obj)
    if indent is None or flat:
        return opener + ", ".join(parts) + closer
    pad = " " * (indent * (level + 1))
    return opener + "\n" + ",\n".join(pad + p for p in parts) + "\n" + " " * (indent * level) + closer


def dumps(obj: Any, indent: int | None = 2) -> str:
    """JSON text with every float at 17 significant digits."""
    return _to_json(plain(obj), indent, 0)


def dumps_line(obj: Any) -> str:
    return dumps(obj, indent=None)


def write_json(path: Path, obj: Any, schema: str | None = None) -> None:
    obj = plain(obj)
    if schema is not None:
        validate(obj, schema)
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"missing input: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps_line(rec) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_matrix_csv(path: Path, x: np.ndarray) -> None:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    with open(path, "w") as fh:
        for row in x:
            fh.write(",".join(fmt_float(v) for v in row) + "\n")


def read_matrix_csv(path: Path) -> DataMatrix:
    try:
        x = np.loadtxt(path, delimiter=",", ndmin=2)
    except FileNotFoundError as exc:
        raise ConfigError(f"missing input: {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: not a numeric CSV matrix: {exc}") from exc
    return DataMatrix(x, {"kind": "loaded", "path": str(path)})


def write_series_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Tidy CSV with a header; floats at 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


# --- schemas -----------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_MATRIX = {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 1}, "minItems": 1}

_MODEL_PROPS = {
    "name": {"type": "string", "minLength": 1},
    "dims": {
        "type": "object",
        "properties": {"n": _POS_INT, "d": _POS_INT, "k": _POS_INT},
        "required": ["n", "d", "k"],
        "additionalProperties": False,
    },
    "tau0": _POS,
    "lambda_diag": {"type": "array", "items": _POS, "minItems": 1},
    "seed": {"type": "integer", "minimum": 0},
    "data": {"type": "string"},
    "metadata": {"type": "object"},
}

_CAVI = {
    "type": "object",
    "properties": {
        "epsilon": _POS,
        "max_iters": _POS_INT,
        "init": {
            "type": "object",
            "properties": {
                "mu_z": {
                    "oneOf": [
                        _NUM,
                        _MATRIX,
                        {"type": "string", "pattern": r"^random\(\s*\d+\s*\)$"},
                    ]
                },
                "sigma_z": {"oneOf": [{"const": "identity"}, _POS, _MATRIX]},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


def _command_schema(required: list[str], extra: dict | None = None) -> dict:
    props = dict(_MODEL_PROPS)
    props["cavi"] = _CAVI
    props.update(extra or {})
    return {
        "type": "object",
        "properties": props,
        "required": required,
        "additionalProperties": False,
    }


_BASE_REQ = ["name", "dims", "tau0"]

SCHEMAS: dict[str, dict] = {
    "simulate": _command_schema(
        _BASE_REQ + ["seed"], {"w0": {"oneOf": [{"const": "ones"}, _MATRIX]}}
    ),
    "fit": _command_schema(_BASE_REQ),
    "analyze-k1": _command_schema(_BASE_REQ, {"horizon": _POS_INT}),
    "gcorr": _command_schema(_BASE_REQ),
    "stationary": _command_schema(_BASE_REQ, {"state": {"type": "string"}}),
    "verify": {
        "type": "object",
        "properties": {
            "name": {"type": "string", "minLength": 1},
            "trials": _POS_INT,
            "dim": _POS_INT,
            "seed": {"type": "integer", "minimum": 0},
            "metadata": {"type": "object"},
        },
        "required": ["name"],
        "additionalProperties": False,
    },
    # outputs
    "trace_record": {
        "type": "object",
        "properties": {
            "t": _POS_INT,
            "elbo": _NUM,
            "delta_rel": {"type": ["number", "null"]},
            "mu_z_norm": _NUM,
            "mu_w_norm": _NUM,
        },
        "required": ["t", "elbo", "delta_rel", "mu_z_norm", "mu_w_norm"],
        "additionalProperties": False,
    },
    "generative": {
        "type": "object",
        "properties": {
            "seed": {"type": "integer"},
            "w0": _MATRIX,
            "dims": {"type": "object"},
            "tau0": _POS,
            "metadata": {"type": "object"},
        },
        "required": ["seed", "w0", "dims"],
    },
    "fit_result": {
        "type": "object",
        "properties": {
            "status": {"enum": ["converged", "max_iters"]},
            "iterations": _POS_INT,
            "elbo": _NUM,
            "state": {
                "type": "object",
                "properties": {k: _MATRIX for k in ("mu_w", "sigma_w", "mu_z", "sigma_z")},
                "required": ["mu_w", "sigma_w", "mu_z", "sigma_z"],
            },
            "metadata": {"type": "object"},
        },
        "required": ["status", "iterations", "elbo", "state"],
    },
    "fixed_points": {
        "type": "object",
        "properties": {
            "lambda1": _POS,
            "status": {"type": "string"},
            "poly_coeffs": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
            "positive_roots_u": {"type": "array", "items": _POS, "maxItems": 2},
            "candidates": {"type": "array", "maxItems": 2},
            "verified": {"type": "array", "items": {"type": "boolean"}},
            "jacobian_eigs": {"type": "array"},
            "elbos": {"type": "array", "items": _NUM},
            "alpha_beta": {"oneOf": [{"const": "complex"}, {"type": "array", "items": _NUM}]},
        },
        "required": ["lambda1", "status", "poly_coeffs", "positive_roots_u", "candidates"],
    },
    "gcorr_report": {
        "type": "object",
        "properties": {
            "term1": _NUM,
            "term2": _NUM,
            "term3": _NUM,
            "term4": _NUM,
            "gamma0": _NUM,
            "max_term": {
                "type": "object",
                "properties": {"index": {"enum": [1, 2, 3, 4]}, "value": _NUM},
                "required": ["index", "value"],
            },
            "satisfied": {"type": "boolean"},
            "r0_note": {"type": "string"},
        },
        "required": ["term1", "term2", "term3", "term4", "gamma0", "max_term", "satisfied"],
    },
    "hessian": {
        "type": "object",
        "properties": {
            "eigvals": {"type": "array", "items": _NUM, "minItems": 1},
            "min_abs_over_max_abs": _NUM,
            "singular_flag": {"type": "boolean"},
            "grad_norm_at_point": _NUM,
            "sing_tol": _POS,
        },
        "required": ["eigvals", "min_abs_over_max_abs", "singular_flag", "grad_norm_at_point"],
    },
    "verify_result": {
        "type": "object",
        "properties": {
            "all_passed": {"type": "boolean"},
            "suites": {"type": "object"},
            "diagnostics": {"type": "object"},
            "metadata": {"type": "object"},
        },
        "required": ["all_passed", "suites"],
    },
}


def validate(obj: Any, schema: str) -> None:
    try:
        jsonschema.validate(obj, SCHEMAS[schema])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{schema}: {where}: {exc.message}") from exc


def load_config(path: Path, command: str) -> dict:
    cfg = read_json(path)
    validate(cfg, command)
    return cfg


def hyper_from_config(cfg: dict) -> Hyper:
    dims = cfg["dims"]
    try:
        return Hyper(dims["n"], dims["d"], dims["k"], float(cfg["tau0"]), cfg.get("lambda_diag"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


_RANDOM = re.compile(r"^random\(\s*(\d+)\s*\)$")


def cavi_config_from(cfg: dict, hyper: Hyper) -> CaviConfig:
    """CaviConfig from the ``cavi`` block: {"epsilon", "max_iters", "init": {"mu_z", "sigma_z"}}."""
    block = cfg.get("cavi", {})
    init = block.get("init", {})
    mu = init.get("mu_z")
    if isinstance(mu, str):
        seed = int(_RANDOM.match(mu).group(1))
        mu = np.random.default_rng(seed).standard_normal((hyper.n, hyper.k))
    elif isinstance(mu, (int, float)):
        mu = np.full((hyper.n, hyper.k), float(mu))
    elif mu is not None:
        mu = np.asarray(mu, dtype=float)
    sigma = init.get("sigma_z", "identity")
    if sigma == "identity":
        sigma = None
    elif isinstance(sigma, (int, float)):
        sigma = float(sigma) * np.eye(hyper.k)
    else:
        sigma = np.asarray(sigma, dtype=float)
    kwargs = {k: block[k] for k in ("epsilon", "max_iters") if k in block}
    try:
        return CaviConfig(mu_z0=mu, sigma_z0=sigma, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
