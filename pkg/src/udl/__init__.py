"""Lasso dictionary learning by alternating minimization and unrolled solvers."""

from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    ShapeError,
    SingularSupportError,
    UDLError,
    UnstableGradientError,
)
from .linops import (
    ConvDictionary,
    DenseDictionary,
    LipschitzEstimate,
    RankOneConvDictionary,
    adjoint,
    apply,
    lipschitz,
    project_unit_norm,
)
from .sparse_coding import (
    IterateTrace,
    UnrollConfig,
    fista,
    ista,
    lambda_max,
    lasso_cost,
    reference_solution,
    soft_threshold,
    solve,
    support,
)

__version__ = "0.1.0"
