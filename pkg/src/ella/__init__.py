"""Selective subspace de-correlation for continual low-rank adapter training."""

from .estimator import ELLAClassifier, ortho_penalty
from .harness import (
    AccMatrix,
    DiagnosticsRecord,
    RunConfig,
    compute_metrics,
    general_ability,
    lambda_sweep,
    loss_change_histogram,
    opposing_update_magnitude,
    run_sequence,
    single_task_baseline,
)
from .regularizer import (
    EnergyMatrix,
    PastAccumulator,
    ShrinkageProblem,
    energy,
    interference,
    interference_bound,
    penalty,
    penalty_energy_bound,
    penalty_grad,
    penalty_grad_factors,
    percoord_objective,
    percoord_oracle,
    shrinkage_solve,
)

__version__ = "0.1.0"
