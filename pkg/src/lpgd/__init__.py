"""Lagrangian proximal gradient descent for optimization layers.

A box- and equality-constrained QP/LP solver, Lagrange-Moreau envelopes and
their proximal maps, LPGD/LPPM backward passes, an implicit-differentiation
baseline, and a small training pipeline with experiment drivers.
"""
from .envelope import (
    EnvelopeConfig,
    LossKind,
    LossSpec,
    SweepTable,
    Variant,
    dual_loss_reduction,
    envelope_sweep,
    envelope_value,
    lagrangian_divergence,
    perturbed_problem,
    proximal_map,
)
from .errors import *  # noqa: F401,F403
from .implicit import implicit_gradient_qp
from .pipeline import (
    AffineBackbone,
    LearnableParams,
    Method,
    OptimizerConfig,
    OptimizerKind,
    Sample,
    TrainConfig,
    TrainTrace,
    evaluate,
    train,
)
from .solver import (
    PrimalDualSolution,
    ProblemParameters,
    SolverReport,
    SolverSettings,
    solve,
    solve_exact_lp,
)
from .sudoku import SudokuInstance, generate_sudoku_dataset
from .updates import (
    UpdateVector,
    bb_update,
    central_difference_update,
    fenchel_young_gradient,
    lpgd_update,
    lppm_update,
    projection_limit_update,
    spo_plus_gradient,
)

__version__ = "0.1.0"
