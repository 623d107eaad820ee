"""Cost-bounded exploration step: hinge step solver, trust region and the
full exploration decision for one state."""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .approximator import ActionBox, GaussianPolicyOutput, GradientTriple
from .errors import InvalidInputError
from .sigma_geometry import (
    ProjectionCase, as_covariance, as_gradient, detect_conflict, project_mgda, sigma_inner,
)

logger = logging.getLogger(__name__)

DEGENERATE_QUAD = 1e-12


class StepCase(Enum):
    FULL_STEP = "full_step"
    ZERO_STEP = "zero_step"
    CLIPPED = "clipped"


@dataclass(frozen=True)
class StepSolution:
    """Optimal step length along g* and the scalars it was derived from."""
    eta_star: float
    s: float
    r: float
    case_id: StepCase


@dataclass(frozen=True)
class TrustRegion:
    """KL radius of the exploration shift and its tuning parameters."""
    delta: float
    delta_max: float = 6.0
    lr_delta: float = 1e-4
    delta_min: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.delta_min <= self.delta <= self.delta_max:
            raise InvalidInputError(
                f"信赖域需满足 0 < {self.delta_min} <= {self.delta} <= {self.delta_max}"
            )


@dataclass(frozen=True)
class ExplorationDecision:
    """Exploration mean for one state plus diagnostics for logging."""
    mu_E: np.ndarray
    eta_star: float
    g_star: np.ndarray
    conflicted: bool
    in_safe_region: bool
    clipped_dims: int
    kl: float = 0.0
    projection_case: Optional[ProjectionCase] = None
    step_case: Optional[StepCase] = None
    fallback: bool = False


def eta_from_delta(delta: float, g: Sequence[float], sigma: Sequence[float]) -> float:
    """Step length whose mean shift eta * Sigma g has KL exactly delta."""
    if not delta > 0.0:
        raise InvalidInputError(f"KL 半径必须为正, 实际 {delta}")
    g = as_gradient(g)
    quad = sigma_inner(g, g, as_covariance(sigma, g.shape[0]))
    if quad <= DEGENERATE_QUAD:
        return 0.0
    return float(np.sqrt(2.0 * delta / quad))


def hinge(eta: float, s: float, r: float) -> float:
    """Predicted cost overshoot max(0, eta * s - r)."""
    return max(0.0, eta * s - r)


def solve_step(s: float, r: float, eta_max: float) -> StepSolution:
    """Largest step in [0, eta_max] among the minimizers of the hinge.

    s = 0 always yields a zero step.
    """
    if not eta_max >= 0.0:
        raise InvalidInputError(f"eta_max 必须非负, 实际 {eta_max}")
    if s < 0.0:
        return StepSolution(eta_max, s, r, StepCase.FULL_STEP)
    if s == 0.0 or r < 0.0:
        return StepSolution(0.0, s, r, StepCase.ZERO_STEP)
    limit = r / s
    if limit >= eta_max:
        return StepSolution(eta_max, s, r, StepCase.FULL_STEP)
    return StepSolution(limit, s, r, StepCase.CLIPPED)


def update_delta(tr: TrustRegion, recent_mean_cost: float, d: float) -> TrustRegion:
    """Projected step: widen the region under budget, shrink it over budget."""
    delta = tr.delta + tr.lr_delta * (d - recent_mean_cost)
    return replace(tr, delta=float(np.clip(delta, tr.delta_min, tr.delta_max)))


def recent_episode_cost(window_costs: Sequence[float], episode_length: int) -> float:
    """Per-episode cost estimate from the most recent per-step costs."""
    costs = np.asarray(window_costs, dtype=np.float64)
    if costs.size == 0:
        return 0.0
    return float(costs.sum() * episode_length / costs.size)


def explore(policy_out: GaussianPolicyOutput, grads: GradientTriple, lam: float, d: float,
            q_c_mean: float, tr: TrustRegion, action_box: ActionBox) -> ExplorationDecision:
    """Shifted exploration mean for one state.

    In the safe region (q_c_mean <= d) the raw Lagrangian direction is used
    with the full trust-region step; otherwise the direction is projected onto
    the exploration cone and the step is bounded by the remaining budget.
    """
    mu_t = np.asarray(policy_out.mu, dtype=np.float64)
    sigma = policy_out.covariance
    if not (grads.is_finite() and np.isfinite(q_c_mean) and np.isfinite(lam)):
        logger.warning("探索梯度非有限, 退化为目标策略均值")
        return ExplorationDecision(
            mu_E=action_box.clip(mu_t), eta_star=0.0, g_star=np.zeros_like(mu_t),
            conflicted=False, in_safe_region=bool(q_c_mean <= d), clipped_dims=0,
            fallback=True,
        )

    g_raw = grads.g_r - lam * grads.g_c
    in_safe = bool(q_c_mean <= d)
    conflicted = False
    projection_case = None
    step_case = None
    if in_safe:
        g_star = g_raw
        eta_star = eta_from_delta(tr.delta, g_star, sigma)
    else:
        conflicted = detect_conflict(grads.g_r, grads.g_c, g_raw, sigma).conflicting
        projection = project_mgda(grads.g_r, grads.g_c, lam, sigma)
        g_star, projection_case = projection.g_star, projection.case_id
        eta_max = eta_from_delta(tr.delta, g_star, sigma)
        step = solve_step(sigma_inner(grads.g_m, g_star, sigma), d - q_c_mean, eta_max)
        eta_star, step_case = step.eta_star, step.case_id

    shifted = mu_t + eta_star * sigma * g_star
    mu_e = action_box.clip(shifted)
    clipped = int(np.count_nonzero(mu_e != shifted))
    kl = 0.5 * eta_star ** 2 * sigma_inner(g_star, g_star, sigma)
    return ExplorationDecision(
        mu_E=mu_e, eta_star=eta_star, g_star=g_star, conflicted=conflicted,
        in_safe_region=in_safe, clipped_dims=clipped, kl=kl,
        projection_case=projection_case, step_case=step_case,
    )
