"""ADMM for 1-norm regularized least squares with recursive equality constraints."""

from .admm import AdmmSolver, Block, SolveReport, SplitState, Status, soft_threshold, solve
from .errors import (
    DimensionMismatch,
    L1MpcError,
    MaxIterReached,
    NonFinite,
    NotDetectable,
    NotPSD,
    NotStabilizable,
    NumericalFailure,
    Singular,
)
from .model import (
    AugmentedSystem,
    ProblemInstance,
    StageSystem,
    TankParams,
    augment_delta_u,
    discretize_zoh,
    quadruple_tank_continuous,
    validate_system,
)
from .mpc import MpcConfig, Trajectory, kalman_gain, run_mpc, run_tank
from .riccati import KktRhs, ProjectionCost, RiccatiCache, build_projection_cost, factorize, kkt_solve

__version__ = "0.1.0"
