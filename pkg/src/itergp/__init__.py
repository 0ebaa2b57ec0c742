"""Computation-aware Gaussian process regression."""

from .kernels import DenseOperator, KernelMatrix, KernelParams, cross_block, evaluate
from .policies import (
    ActionSequence,
    ConjugateResidual,
    Eigenvector,
    Mixed,
    PseudoInput,
    Random,
    Residual,
    UnitVector,
    build_partial_cholesky_preconditioner,
    diagonal_preconditioner,
    make_policy,
)
from .posterior import (
    CombinedPosterior,
    UncertaintyBreakdown,
    decompose_variance,
    extend_online,
    fit,
    predict_cov,
    predict_mean,
    resume,
    sample_paths,
)
from .solver import (
    DegenerateAction,
    LowRankPrecision,
    SolverState,
    StoppingConfig,
    precision_matvec,
    relative_error_bound,
    run,
    solver_step,
)

__version__ = "0.1.0"
