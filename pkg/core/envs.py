"""Desk-scale constrained MDPs and their ground-truth oracles.

ToyVelocity: state (x, v), acceleration in [-1, 1], progress reward, binary
over-speed cost. ToySparseGoal: 1-D position, sparse goal bonus, a cost pit
on the way. Both expose `reset(rng)` and `step(state, action, rng, t)`; any
object with that pair of methods works with env_reset / env_step / mc_oracle.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Protocol, Tuple

import numpy as np

from .approximator import ActionBox
from .errors import InvalidInputError
from .quantile_critics import tau_levels

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CmdpStep:
    """Outcome of one environment transition."""
    next_state: np.ndarray
    reward: float
    cost: float
    terminated: bool
    truncated: bool


class CmdpSpec(Protocol):
    horizon: int

    @property
    def obs_dim(self) -> int: ...

    @property
    def action_box(self) -> ActionBox: ...

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator,
             t: int) -> CmdpStep: ...


def _noise(rng: np.random.Generator, std: float) -> float:
    return float(rng.normal(0.0, std)) if std > 0.0 else 0.0


@dataclass(frozen=True)
class ToyVelocitySpec:
    """Point mass on a line; cost 1 whenever the new velocity exceeds the threshold."""
    dt: float = 0.05
    v_threshold: float = 1.0
    ctrl_weight: float = 0.001
    horizon: int = 200
    noise_std: float = 0.01
    init_perturbation: float = 0.01

    def __post_init__(self):
        if self.dt <= 0.0 or self.horizon < 1:
            raise InvalidInputError("dt 必须为正且 horizon >= 1")
        if self.noise_std < 0.0 or self.init_perturbation < 0.0:
            raise InvalidInputError("噪声参数必须非负")

    @property
    def obs_dim(self) -> int:
        return 2

    @property
    def action_box(self) -> ActionBox:
        return ActionBox(np.array([-1.0]), np.array([1.0]))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        if self.init_perturbation == 0.0:
            return np.zeros(2)
        return rng.uniform(-self.init_perturbation, self.init_perturbation, size=2)

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator,
             t: int) -> CmdpStep:
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        x, v = float(state[0]), float(state[1])
        v_next = v + a * self.dt + _noise(rng, self.noise_std)
        x_next = x + v_next * self.dt
        return CmdpStep(
            next_state=np.array([x_next, v_next]),
            reward=v_next * self.dt - self.ctrl_weight * a * a,
            cost=1.0 if v_next > self.v_threshold else 0.0,
            terminated=False,
            truncated=t + 1 >= self.horizon,
        )


@dataclass(frozen=True)
class ToySparseGoalSpec:
    """Walk to a goal for a one-off bonus; every step inside the pit costs 1."""
    step_size: float = 0.05
    goal: float = 1.0
    goal_bonus: float = 30.0
    pit: Tuple[float, float] = (0.45, 0.55)
    lower_wall: float = -1.0
    ctrl_weight: float = 0.001
    horizon: int = 100
    noise_std: float = 0.01
    init_perturbation: float = 0.01

    def __post_init__(self):
        if self.step_size <= 0.0 or self.horizon < 1:
            raise InvalidInputError("step_size 必须为正且 horizon >= 1")
        if not self.lower_wall < self.pit[0] <= self.pit[1] < self.goal:
            raise InvalidInputError("需满足 lower_wall < pit < goal")

    @property
    def obs_dim(self) -> int:
        return 1

    @property
    def action_box(self) -> ActionBox:
        return ActionBox(np.array([-1.0]), np.array([1.0]))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        if self.init_perturbation == 0.0:
            return np.zeros(1)
        return rng.uniform(-self.init_perturbation, self.init_perturbation, size=1)

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator,
             t: int) -> CmdpStep:
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        x = float(state[0]) + a * self.step_size + _noise(rng, self.noise_std)
        x = max(x, self.lower_wall)
        reached = x >= self.goal
        in_pit = self.pit[0] <= x <= self.pit[1]
        return CmdpStep(
            next_state=np.array([x]),
            reward=(self.goal_bonus if reached else 0.0) - self.ctrl_weight * a * a,
            cost=1.0 if in_pit else 0.0,
            terminated=reached,
            truncated=(not reached) and t + 1 >= self.horizon,
        )


def env_reset(spec: CmdpSpec, seed: int) -> np.ndarray:
    """Initial state drawn from a generator seeded with `seed`."""
    return spec.reset(np.random.default_rng(seed))


def env_step(spec: CmdpSpec, state: np.ndarray, action: np.ndarray,
             rng: np.random.Generator, t: int = 0) -> CmdpStep:
    """One transition from `state` taken at step index `t`."""
    return spec.step(np.asarray(state, dtype=np.float64), action, rng, t)


class CmdpEnv:
    """Stateful wrapper: owns a spec, the current state, the step index and an RNG."""

    def __init__(self, spec: CmdpSpec, seed: int):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.state = spec.reset(self.rng)
        self.t = 0

    @property
    def obs_dim(self) -> int:
        return self.spec.obs_dim

    @property
    def action_box(self) -> ActionBox:
        return self.spec.action_box

    def reset(self) -> np.ndarray:
        self.state = self.spec.reset(self.rng)
        self.t = 0
        return self.state.copy()

    def set_state(self, state: np.ndarray, t: int = 0) -> None:
        self.state = np.array(state, dtype=np.float64)
        self.t = int(t)

    def step(self, action: np.ndarray) -> CmdpStep:
        result = self.spec.step(self.state, action, self.rng, self.t)
        self.state = result.next_state
        self.t += 1
        return result

    def snapshot(self) -> Dict[str, Any]:
        return {"state": self.state.tolist(), "t": self.t, "rng": self.rng.bit_generator.state}

    def restore(self, snapshot: Dict[str, Any]) -> None:
        self.set_state(np.array(snapshot["state"]), snapshot["t"])
        self.rng.bit_generator.state = snapshot["rng"]


@dataclass(frozen=True)
class OracleEstimate:
    """Monte-Carlo estimate of the discounted return and cost distributions."""
    mean_return: float
    mean_cost: float
    return_quantiles: np.ndarray
    cost_quantiles: np.ndarray
    n_rollouts: int
    return_stderr: float
    cost_stderr: float


def _stderr(samples: np.ndarray) -> float:
    if samples.size < 2:
        return 0.0
    return float(samples.std(ddof=1) / np.sqrt(samples.size))


def mc_oracle(spec: CmdpSpec, frozen_policy: Callable[[np.ndarray], np.ndarray],
              state: np.ndarray, action: np.ndarray, n_rollouts: int, gamma: float,
              horizon: int, n_quantiles: int = 25, seed: int = 0, t0: int = 0) -> OracleEstimate:
    """Execute (state, action), then follow `frozen_policy` for up to `horizon` steps in total.

    Quantiles are empirical at levels (m - 0.5) / M of the discounted sums.
    """
    if n_rollouts < 1:
        raise InvalidInputError("n_rollouts 必须 >= 1")
    if horizon < 1:
        raise InvalidInputError("horizon 必须 >= 1")
    rng = np.random.default_rng(seed)
    returns = np.zeros(n_rollouts)
    costs = np.zeros(n_rollouts)
    for i in range(n_rollouts):
        s = np.asarray(state, dtype=np.float64)
        a = np.asarray(action, dtype=np.float64)
        discount = 1.0
        for k in range(horizon):
            result = spec.step(s, a, rng, t0 + k)
            returns[i] += discount * result.reward
            costs[i] += discount * result.cost
            if result.terminated or result.truncated:
                break
            discount *= gamma
            if discount == 0.0:
                break
            s = result.next_state
            a = frozen_policy(s)
    levels = tau_levels(n_quantiles)
    return OracleEstimate(
        mean_return=float(returns.mean()),
        mean_cost=float(costs.mean()),
        return_quantiles=np.quantile(returns, levels, method="inverted_cdf"),
        cost_quantiles=np.quantile(costs, levels, method="inverted_cdf"),
        n_rollouts=n_rollouts,
        return_stderr=_stderr(returns),
        cost_stderr=_stderr(costs),
    )


@dataclass(frozen=True)
class DpSolution:
    """Constrained optimum on the velocity lattice.

    policy[t, i, b] is the optimal acceleration at step t, velocity v_grid[i]
    and b units of budget already spent (b = 0 only when unconstrained).
    """
    best_return: float
    policy: np.ndarray
    v_grid: np.ndarray
    actions: np.ndarray
    budget: Optional[int] = None
    feasible: bool = True


def dp_constrained_optimum(spec: ToyVelocitySpec, grid_resolution: int,
                           d_episode: float) -> DpSolution:
    """Backward induction over (t, v, budget spent) for the noise-free ToyVelocity.

    Accelerations lie on a uniform grid with an odd number of points, so every
    reachable velocity lies on a lattice of spacing 2 dt / (K - 1) starting at
    0. Velocities are kept in [0, v_cap]; above v_threshold every step costs
    one budget unit, so v_cap never needs to exceed v_threshold + (B + 1) dt.
    """
    if not isinstance(spec, ToyVelocitySpec):
        raise InvalidInputError("动态规划基线只支持 ToyVelocity")
    if grid_resolution < 50:
        raise InvalidInputError(f"网格分辨率必须 >= 50, 实际 {grid_resolution}")
    if d_episode < 0.0:
        raise InvalidInputError("回合成本上限必须非负 (负预算不可行)")

    k = grid_resolution + 1 if grid_resolution % 2 == 0 else grid_resolution
    actions = np.linspace(-1.0, 1.0, k)
    half = (k - 1) // 2
    h = 2.0 * spec.dt / (k - 1)
    horizon = spec.horizon
    unconstrained = d_episode >= horizon
    budget = None if unconstrained else int(np.floor(d_episode))

    v_cap = horizon * spec.dt
    if not unconstrained:
        v_cap = min(v_cap, spec.v_threshold + (budget + 1) * spec.dt)
    n_v = int(np.floor(v_cap / h + 1e-9)) + 1
    v_grid = np.arange(n_v) * h
    n_b = 1 if unconstrained else budget + 1

    # next-velocity index and one-step reward / cost for every (i, j)
    shift = np.arange(k) - half
    next_idx = np.arange(n_v)[:, None] + shift[None, :]
    valid = (next_idx >= 0) & (next_idx < n_v)
    next_idx_c = np.clip(next_idx, 0, n_v - 1)
    v_next = v_grid[next_idx_c]
    reward = v_next * spec.dt - spec.ctrl_weight * actions[None, :] ** 2
    step_cost = (v_next > spec.v_threshold + 1e-12).astype(int)
    if unconstrained:
        step_cost = np.zeros_like(step_cost)

    value = np.zeros((n_v, n_b))
    policy = np.zeros((horizon, n_v, n_b))
    spent = np.arange(n_b)
    for t in reversed(range(horizon)):
        new_spent = spent[None, None, :] + step_cost[:, :, None]
        ok = valid[:, :, None] & (new_spent < n_b)
        future = value[next_idx_c[:, :, None], np.clip(new_spent, 0, n_b - 1)]
        q = np.where(ok, reward[:, :, None] + future, -np.inf)
        best = np.argmax(q, axis=1)
        value = np.take_along_axis(q, best[:, None, :], axis=1)[:, 0, :]
        policy[t] = actions[best]

    best_return = float(value[0, 0])
    feasible = bool(np.isfinite(best_return))
    if not feasible:
        logger.warning("动态规划: 预算 %.3f 下无可行策略", d_episode)
    return DpSolution(best_return=best_return, policy=policy, v_grid=v_grid,
                      actions=actions, budget=budget, feasible=feasible)


def rollout_dp_policy(spec: ToyVelocitySpec, solution: DpSolution) -> Tuple[float, float]:
    """Return and cost of following the DP table on the noise-free lattice."""
    h = solution.v_grid[1] - solution.v_grid[0] if solution.v_grid.size > 1 else spec.dt
    i, b = 0, 0
    total_r = total_c = 0.0
    for t in range(spec.horizon):
        a = solution.policy[t, i, b]
        i = int(round((solution.v_grid[i] + a * spec.dt) / h))
        v = solution.v_grid[i]
        total_r += v * spec.dt - spec.ctrl_weight * a * a
        if v > spec.v_threshold + 1e-12:
            total_c += 1.0
            if solution.budget is not None:
                b += 1
    return total_r, total_c


SPEC_TYPES: Dict[str, type] = {
    "toy_velocity": ToyVelocitySpec,
    "toy_sparse_goal": ToySparseGoalSpec,
}


def make_spec(name: str, **constants) -> CmdpSpec:
    """Build an environment spec by name; constants the spec does not define are ignored."""
    if name not in SPEC_TYPES:
        raise InvalidInputError(f"未知环境: {name}")
    cls = SPEC_TYPES[name]
    accepted = {f for f in cls.__dataclass_fields__}
    return cls(**{k: v for k, v in constants.items() if k in accepted})
