"""Deterministic evaluation of a policy and the cost-estimation bias diagnostic."""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .approximator import GaussianPolicy, QuantileEnsemble, policy_forward, predict_atoms
from .envs import CmdpSpec, mc_oracle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpisodeRecord:
    index: int
    seed: int
    episode_return: float
    episode_cost: float
    length: int
    violated: bool


@dataclass
class EvalSummary:
    """Aggregate of n deterministic episodes; all statistics are None when n = 0."""
    n_episodes: int = 0
    mean_return: Optional[float] = None
    median_return: Optional[float] = None
    mean_cost: Optional[float] = None
    violation_rate: Optional[float] = None
    episodes: List[EpisodeRecord] = field(default_factory=list)
    # (step index, state) pairs visited by the first episode
    first_episode_states: List[Tuple[int, np.ndarray]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "mean_return": self.mean_return,
            "median_return": self.median_return,
            "mean_cost": self.mean_cost,
            "violation_rate": self.violation_rate,
        }


def deterministic_action(policy: GaussianPolicy, spec: CmdpSpec):
    """Mean action of the target policy, clipped to the action box."""
    box = spec.action_box
    return lambda state: box.clip(policy_forward(policy, state).mu)


def evaluate_policy(spec: CmdpSpec, policy: GaussianPolicy, n_episodes: int, seed: int,
                    cost_limit: float) -> EvalSummary:
    """Roll out the mean action for `n_episodes` episodes seeded seed, seed+1, ..."""
    if n_episodes <= 0:
        return EvalSummary()
    act = deterministic_action(policy, spec)
    episodes: List[EpisodeRecord] = []
    first_states: List[Tuple[int, np.ndarray]] = []
    for i in range(n_episodes):
        rng = np.random.default_rng(seed + i)
        state = spec.reset(rng)
        total_r = total_c = 0.0
        t = 0
        while True:
            if i == 0:
                first_states.append((t, state.copy()))
            result = spec.step(state, act(state), rng, t)
            total_r += result.reward
            total_c += result.cost
            t += 1
            state = result.next_state
            if result.terminated or result.truncated:
                break
        episodes.append(EpisodeRecord(i, seed + i, total_r, total_c, t, total_c > cost_limit))

    returns = np.array([e.episode_return for e in episodes])
    costs = np.array([e.episode_cost for e in episodes])
    return EvalSummary(
        n_episodes=n_episodes,
        mean_return=float(returns.mean()),
        median_return=float(np.median(returns)),
        mean_cost=float(costs.mean()),
        violation_rate=float(np.mean([e.violated for e in episodes])),
        episodes=episodes,
        first_episode_states=first_states,
    )


def cost_bias(spec: CmdpSpec, policy: GaussianPolicy, cost_critics: QuantileEnsemble,
              states: Sequence[Tuple[int, np.ndarray]], n_states: int, n_rollouts: int,
              gamma: float, seed: int) -> Optional[float]:
    """Mean of critic Q_c^mean(s, mu(s)) minus the Monte-Carlo discounted cost.

    Uses `n_states` states spread evenly over `states`.
    """
    if n_states <= 0 or not states:
        return None
    act = deterministic_action(policy, spec)
    picks = np.unique(np.linspace(0, len(states) - 1, n_states).round().astype(int))
    gaps = []
    for k, idx in enumerate(picks):
        t, state = states[idx]
        action = act(state)
        critic = float(predict_atoms(cost_critics, state, action).atoms.mean())
        oracle = mc_oracle(spec, act, state, action, n_rollouts, gamma,
                           horizon=spec.horizon - t, seed=seed + k, t0=t)
        gaps.append(critic - oracle.mean_cost)
    return float(np.mean(gaps))


def write_episodes(path: str, summary: EvalSummary) -> str:
    """Per-episode records as JSON lines."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for episode in summary.episodes:
            f.write(json.dumps(asdict(episode), sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path
