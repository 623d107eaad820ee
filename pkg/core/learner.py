"""Offline update engine: TQC critics, ALM actor, multiplier, temperature, targets."""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .approximator import (
    ActionBox, AdamState, GaussianPolicy, Optimizer, QuantileEnsemble,
    bound_action_gradient, gaussian_log_prob, sample_action,
)
from .errors import InvalidInputError
from .quantile_critics import (
    Objective, TruncationSpec, bellman_target, cost_bounds, cost_ub_atom_grad,
    mean_atom_grad, quantile_huber_loss, truncate_mix,
)

logger = logging.getLogger(__name__)


def convert_limit(d_episode: float, horizon: int, gamma: float) -> float:
    """Per-step discounted Q cap equivalent to an episode cost limit."""
    if horizon < 1:
        raise InvalidInputError(f"回合长度必须 >= 1, 实际 {horizon}")
    if not 0.0 <= gamma < 1.0:
        raise InvalidInputError(f"折扣因子必须在 [0, 1) 内 (gamma=1 时公式奇异), 实际 {gamma}")
    return d_episode * (1.0 - gamma ** horizon) / (horizon * (1.0 - gamma))


@dataclass(frozen=True)
class LagrangianState:
    """Dual variable, ALM coefficient and the converted cost cap."""
    lam: float
    lr_lambda: float
    alm_c: float
    d_q: float
    d_episode: float

    @classmethod
    def from_limit(cls, d_episode: float, horizon: int, gamma: float, lam: float = 1.0,
                   lr_lambda: float = 3e-4, alm_c: float = 10.0) -> "LagrangianState":
        if d_episode < 0.0:
            raise InvalidInputError("回合成本上限必须非负")
        if alm_c <= 0.0:
            raise InvalidInputError("ALM 系数必须为正")
        return cls(lam=max(0.0, lam), lr_lambda=lr_lambda, alm_c=alm_c,
                   d_q=convert_limit(d_episode, horizon, gamma), d_episode=d_episode)


@dataclass(frozen=True)
class TemperatureState:
    """Entropy temperature exp(log_alpha) and its tuning target."""
    log_alpha: float
    target_entropy: float
    lr: float
    autotune: bool = True

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))


@dataclass(frozen=True)
class TargetNetworks:
    """Polyak-averaged shadow of a critic ensemble."""
    network: QuantileEnsemble
    tau: float

    @classmethod
    def track(cls, live: QuantileEnsemble, tau: float) -> "TargetNetworks":
        return cls(network=live.copy(), tau=tau)

    @property
    def params(self) -> List[np.ndarray]:
        return self.network.params


def lambda_update(state: LagrangianState, batch_mean_cost_ub: float) -> LagrangianState:
    """Projected dual ascent on the multiplier."""
    lam = state.lam + state.lr_lambda * (batch_mean_cost_ub - state.d_q)
    return replace(state, lam=max(0.0, float(lam)))


def temperature_update(state: TemperatureState, batch_log_probs: Sequence[float]) -> TemperatureState:
    """Gradient step on log alpha towards the target entropy."""
    if not state.autotune:
        return state
    entropy = -float(np.mean(batch_log_probs))
    return replace(state, log_alpha=state.log_alpha - state.lr * (entropy - state.target_entropy))


def polyak_update(targets: TargetNetworks, live: Sequence[np.ndarray]) -> TargetNetworks:
    """shadow <- (1 - tau) * shadow + tau * live, elementwise."""
    shadow = targets.params
    live = list(live)
    if len(shadow) != len(live) or any(s.shape != l.shape for s, l in zip(shadow, live)):
        raise InvalidInputError("目标网络与在线网络形状不一致")
    tau = targets.tau
    network = targets.network.copy()
    network.set_params([(1.0 - tau) * s + tau * l for s, l in zip(shadow, live)])
    return TargetNetworks(network=network, tau=tau)


def alm_penalty(q_c_ub, lam: float, alm_c: float, d: float,
                use_alm: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Switched augmented-Lagrangian penalty and its derivative in q_c_ub.

    Active where lam + c * (q - d) >= 0; elsewhere the penalty is the constant
    -lam^2 / (2c), which keeps it continuous and leaves pure return maximization.
    """
    gap = np.asarray(q_c_ub, dtype=np.float64) - d
    if not use_alm:
        return lam * gap, np.full_like(gap, lam)
    active = lam + alm_c * gap >= 0.0
    value = np.where(active, lam * gap + 0.5 * alm_c * gap * gap, -lam * lam / (2.0 * alm_c))
    grad = np.where(active, lam + alm_c * gap, 0.0)
    return value, grad


@dataclass
class Batch:
    """Minibatch of transitions as stacked arrays."""
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    terminated: np.ndarray

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


@dataclass(frozen=True)
class CriticLosses:
    reward_loss: float
    cost_loss: float


@dataclass(frozen=True)
class ActorLosses:
    actor_loss: float
    entropy: float
    mean_cost_ub: float
    penalty_active: float
    log_probs: np.ndarray


@dataclass(frozen=True)
class LearnerHyper:
    """Hyperparameters of the update engine."""
    gamma: float = 0.99
    truncation: TruncationSpec = TruncationSpec(2, 5)
    kappa: float = 1.0
    critic_lr: float = 3e-4
    policy_lr: float = 3e-4
    beta_c: float = 3.0
    cvar_alpha: int = 13
    use_alm: bool = True
    use_entropy_bonus: bool = True
    target_update_frequency: int = 1


def critic_update(batch: Batch, policy: GaussianPolicy, critics: Tuple[QuantileEnsemble, QuantileEnsemble],
                  targets: Tuple[TargetNetworks, TargetNetworks],
                  optimizers: Tuple[Optimizer, Optimizer], temperature: TemperatureState,
                  hyper: LearnerHyper, action_box: ActionBox,
                  rng: np.random.Generator) -> CriticLosses:
    """One quantile-regression step for the reward and the cost ensemble."""
    if len(batch) == 0:
        raise InvalidInputError("批量为空")
    next_out, _ = policy.forward(batch.next_states)
    next_actions, next_log_prob = sample_action(next_out, rng, action_box)

    reward_next, _ = targets[0].network.forward(batch.next_states, next_actions)
    cost_next, _ = targets[1].network.forward(batch.next_states, next_actions)
    reward_pool = truncate_mix(reward_next, hyper.truncation, Objective.REWARD)
    if hyper.use_entropy_bonus:
        reward_pool = reward_pool - temperature.alpha * next_log_prob[:, None]
    cost_pool = truncate_mix(cost_next, hyper.truncation, Objective.COST)
    # Bootstrap through horizon truncation, not through termination.
    target_sets = (
        bellman_target(batch.rewards, batch.terminated, hyper.gamma, reward_pool),
        bellman_target(batch.costs, batch.terminated, hyper.gamma, cost_pool),
    )

    losses = []
    for ensemble, optimizer, target in zip(critics, optimizers, target_sets):
        pred, caches = ensemble.forward(batch.states, batch.actions)
        loss, grad_atoms = quantile_huber_loss(pred, target, hyper.kappa)
        grads, _ = ensemble.backward(caches, grad_atoms)
        ensemble.set_params(optimizer.step(ensemble.params, grads))
        losses.append(loss)
    return CriticLosses(reward_loss=losses[0], cost_loss=losses[1])


def actor_update(batch: Batch, policy: GaussianPolicy, critics: Tuple[QuantileEnsemble, QuantileEnsemble],
                 lagrangian: LagrangianState, temperature: TemperatureState,
                 optimizer: Optimizer, hyper: LearnerHyper, action_box: ActionBox,
                 rng: np.random.Generator) -> ActorLosses:
    """One step on E[alpha log pi - Q_r^mean + penalty(Q_c^UB)] over reparameterized actions.

    Critics see the clipped action; the clip passes gradients straight through
    so a mean outside the box can still be pulled back by the cost penalty.
    """
    if len(batch) == 0:
        raise InvalidInputError("批量为空")
    out, cache = policy.forward(batch.states)
    xi = rng.standard_normal(out.mu.shape)
    std = out.std
    raw = out.mu + std * xi
    actions = action_box.clip(raw)
    log_prob = gaussian_log_prob(out, raw)

    reward_atoms, grad_q_r = bound_action_gradient(critics[0], batch.states, actions, mean_atom_grad)
    cost_atoms, grad_q_c = bound_action_gradient(
        critics[1], batch.states, actions,
        lambda a: cost_ub_atom_grad(a, hyper.beta_c, hyper.cvar_alpha))
    q_r_mean = reward_atoms.mean(axis=(-2, -1))
    _, q_c_ub, _ = cost_bounds(cost_atoms, hyper.beta_c, hyper.cvar_alpha)
    penalty, dpenalty = alm_penalty(q_c_ub, lagrangian.lam, lagrangian.alm_c, lagrangian.d_q,
                                    hyper.use_alm)

    alpha = temperature.alpha
    per_sample = alpha * log_prob - q_r_mean + penalty
    loss = float(per_sample.mean())
    if not np.isfinite(loss):
        logger.warning("策略损失非有限, 跳过本次策略更新")
        return ActorLosses(loss, -float(np.mean(log_prob)), float(np.mean(q_c_ub)), 0.0, log_prob)

    n = len(batch)
    grad_action = (-grad_q_r + dpenalty[:, None] * grad_q_c) / n
    grad_mu = grad_action
    grad_log_std = grad_action * std * xi - alpha / n
    grads = policy.backward(cache, grad_mu, grad_log_std)
    policy.set_params(optimizer.step(policy.params, grads))

    active = np.mean(lagrangian.lam + lagrangian.alm_c * (q_c_ub - lagrangian.d_q) >= 0.0)
    return ActorLosses(
        actor_loss=loss,
        entropy=-float(np.mean(log_prob)),
        mean_cost_ub=float(np.mean(q_c_ub)),
        penalty_active=float(active),
        log_probs=log_prob,
    )


@dataclass(frozen=True)
class UpdateInfo:
    """Losses of the most recent update phase."""
    reward_loss: float = float("nan")
    cost_loss: float = float("nan")
    actor_loss: float = float("nan")
    entropy: float = float("nan")
    mean_cost_ub: float = float("nan")


class Learner:
    """Sole owner and mutator of every trainable quantity."""

    def __init__(self, policy: GaussianPolicy, reward_critics: QuantileEnsemble,
                 cost_critics: QuantileEnsemble, lagrangian: LagrangianState,
                 temperature: TemperatureState, hyper: LearnerHyper, action_box: ActionBox,
                 tau: float, rng: np.random.Generator):
        self.policy = policy
        self.reward_critics = reward_critics
        self.cost_critics = cost_critics
        self.reward_targets = TargetNetworks.track(reward_critics, tau)
        self.cost_targets = TargetNetworks.track(cost_critics, tau)
        self.lagrangian = lagrangian
        self.temperature = temperature
        self.hyper = hyper
        self.action_box = action_box
        self.rng = rng
        self.policy_optimizer = Optimizer.for_params(policy.params, hyper.policy_lr)
        self.reward_optimizer = Optimizer.for_params(reward_critics.params, hyper.critic_lr)
        self.cost_optimizer = Optimizer.for_params(cost_critics.params, hyper.critic_lr)
        self.critic_steps = 0
        self.actor_steps = 0

    @property
    def live_critics(self) -> Tuple[QuantileEnsemble, QuantileEnsemble]:
        """Critics that feed exploration gradients; never the target shadows."""
        return self.reward_critics, self.cost_critics

    def critic_step(self, batch: Batch) -> CriticLosses:
        losses = critic_update(
            batch, self.policy, self.live_critics, (self.reward_targets, self.cost_targets),
            (self.reward_optimizer, self.cost_optimizer), self.temperature, self.hyper,
            self.action_box, self.rng)
        self.critic_steps += 1
        if self.critic_steps % self.hyper.target_update_frequency == 0:
            self.reward_targets = polyak_update(self.reward_targets, self.reward_critics.params)
            self.cost_targets = polyak_update(self.cost_targets, self.cost_critics.params)
        return losses

    def actor_step(self, batch: Batch) -> ActorLosses:
        losses = actor_update(
            batch, self.policy, self.live_critics, self.lagrangian, self.temperature,
            self.policy_optimizer, self.hyper, self.action_box, self.rng)
        self.actor_steps += 1
        if np.isfinite(losses.actor_loss):
            self.lagrangian = lambda_update(self.lagrangian, losses.mean_cost_ub)
            self.temperature = temperature_update(self.temperature, losses.log_probs)
        return losses

    def update(self, batches: Sequence[Batch], policy_steps: int) -> UpdateInfo:
        """Critic step on every batch; actor step on the first `policy_steps`."""
        critic = actor = None
        for i, batch in enumerate(batches):
            critic = self.critic_step(batch)
            if i < policy_steps:
                actor = self.actor_step(batch)
        return UpdateInfo(
            reward_loss=critic.reward_loss if critic else float("nan"),
            cost_loss=critic.cost_loss if critic else float("nan"),
            actor_loss=actor.actor_loss if actor else float("nan"),
            entropy=actor.entropy if actor else float("nan"),
            mean_cost_ub=actor.mean_cost_ub if actor else float("nan"),
        )

    # -- persistence -------------------------------------------------------

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Every tensor needed to resume, keyed by a stable name."""
        arrays: Dict[str, np.ndarray] = {}
        groups = {
            "policy": self.policy.params,
            "reward_critics": self.reward_critics.params,
            "cost_critics": self.cost_critics.params,
            "reward_targets": self.reward_targets.params,
            "cost_targets": self.cost_targets.params,
        }
        for group, params in groups.items():
            for i, p in enumerate(params):
                arrays[f"{group}/{i}"] = p
        for name, opt in self._optimizers().items():
            for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
                arrays[f"adam/{name}/m/{i}"] = m
                arrays[f"adam/{name}/v/{i}"] = v
        return arrays

    def state_meta(self) -> Dict:
        return {
            "lambda": self.lagrangian.lam,
            "log_alpha": self.temperature.log_alpha,
            "critic_steps": self.critic_steps,
            "actor_steps": self.actor_steps,
            "adam": {name: {"t": o.state.t, "skipped": o.state.skipped}
                     for name, o in self._optimizers().items()},
            "rng": self.rng.bit_generator.state,
        }

    def load_state(self, arrays: Dict[str, np.ndarray], meta: Dict) -> None:
        def group(prefix: str, count: int) -> List[np.ndarray]:
            try:
                return [np.array(arrays[f"{prefix}/{i}"]) for i in range(count)]
            except KeyError as e:
                raise InvalidInputError(f"检查点缺少张量 {e}") from e

        self.policy.set_params(group("policy", len(self.policy.params)))
        self.reward_critics.set_params(group("reward_critics", len(self.reward_critics.params)))
        self.cost_critics.set_params(group("cost_critics", len(self.cost_critics.params)))
        self.reward_targets.network.set_params(group("reward_targets", len(self.reward_targets.params)))
        self.cost_targets.network.set_params(group("cost_targets", len(self.cost_targets.params)))
        for name, opt in self._optimizers().items():
            count = len(opt.state.m)
            info = meta["adam"][name]
            opt.state = AdamState(m=group(f"adam/{name}/m", count), v=group(f"adam/{name}/v", count),
                                  t=int(info["t"]), skipped=int(info["skipped"]))
        self.lagrangian = replace(self.lagrangian, lam=float(meta["lambda"]))
        self.temperature = replace(self.temperature, log_alpha=float(meta["log_alpha"]))
        self.critic_steps = int(meta["critic_steps"])
        self.actor_steps = int(meta["actor_steps"])
        self.rng.bit_generator.state = meta["rng"]

    def _optimizers(self) -> Dict[str, Optimizer]:
        return {"policy": self.policy_optimizer, "reward": self.reward_optimizer,
                "cost": self.cost_optimizer}
