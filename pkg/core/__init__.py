"""Core modules for the COX-Q desk.

`core.training` glues these modules to `config` and is imported directly.
"""

from .errors import (
    CheckpointError, ConfigError, CoxError, InvalidInputError, MetricsFormatError,
    NumericDivergenceError,
)
from .sigma_geometry import (
    ConeProjection, ConflictReport, ProjectionCase, detect_conflict, gram_scalars,
    project_mgda, sigma_inner,
)
from .step_control import (
    ExplorationDecision, StepCase, StepSolution, TrustRegion, eta_from_delta, explore,
    solve_step, update_delta,
)
from .quantile_critics import (
    CriticBounds, Objective, QuantileAtoms, TruncationSpec, bellman_target, cost_bounds,
    quantile_huber_loss, reward_upper_bound, truncate_mix,
)
from .approximator import (
    ActionBox, GaussianPolicy, GradientTriple, QuantileEnsemble, apply_gradient_step,
    critic_action_gradients, policy_forward, predict_atoms,
)
from .learner import (
    LagrangianState, Learner, TargetNetworks, TemperatureState, actor_update,
    convert_limit, critic_update, lambda_update, polyak_update, temperature_update,
)
from .envs import (
    CmdpStep, OracleEstimate, ToySparseGoalSpec, ToyVelocitySpec, dp_constrained_optimum,
    env_reset, env_step, mc_oracle,
)
from .replay import ReplayBuffer, Transition
from .metrics import MetricsRecord, read_metrics
from .verify import Suite, VerifyReport, run_verify

__all__ = [
    'CoxError', 'InvalidInputError', 'NumericDivergenceError', 'ConfigError',
    'CheckpointError', 'MetricsFormatError',
    'sigma_inner', 'gram_scalars', 'detect_conflict', 'project_mgda', 'ConeProjection',
    'ConflictReport', 'ProjectionCase',
    'solve_step', 'eta_from_delta', 'update_delta', 'explore', 'TrustRegion', 'StepSolution',
    'StepCase', 'ExplorationDecision',
    'QuantileAtoms', 'TruncationSpec', 'Objective', 'CriticBounds', 'cost_bounds',
    'reward_upper_bound', 'truncate_mix', 'bellman_target', 'quantile_huber_loss',
    'ActionBox', 'GaussianPolicy', 'QuantileEnsemble', 'GradientTriple', 'policy_forward',
    'predict_atoms', 'critic_action_gradients', 'apply_gradient_step',
    'LagrangianState', 'TemperatureState', 'TargetNetworks', 'Learner', 'convert_limit',
    'critic_update', 'actor_update', 'lambda_update', 'temperature_update', 'polyak_update',
    'CmdpStep', 'ToyVelocitySpec', 'ToySparseGoalSpec', 'OracleEstimate', 'env_reset',
    'env_step', 'mc_oracle', 'dp_constrained_optimum',
    'ReplayBuffer', 'Transition', 'MetricsRecord', 'read_metrics',
    'Suite', 'VerifyReport', 'run_verify',
]
