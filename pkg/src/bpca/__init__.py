"""Coordinate ascent variational inference for Bayesian PCA, with tools for
studying its convergence."""

__version__ = "0.1.0"

from .cavi import (  # noqa: E402
    CaviConfig,
    MatrixNormal,
    NumericalAbort,
    TraceLog,
    VariationalState,
    elbo_0,
    iterate_sweeps,
    run_cavi,
    update_w,
    update_z,
)
from .model import (  # noqa: E402
    DataMatrix,
    Hyper,
    log_posterior_unnorm,
    sample_dataset,
    spectral_decompose,
)

__all__ = [
    "CaviConfig",
    "DataMatrix",
    "Hyper",
    "MatrixNormal",
    "NumericalAbort",
    "TraceLog",
    "VariationalState",
    "elbo_0",
    "iterate_sweeps",
    "log_posterior_unnorm",
    "run_cavi",
    "sample_dataset",
    "spectral_decompose",
    "update_w",
    "update_z",
]
