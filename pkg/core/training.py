"""Collection / update phase loop, checkpoint-based resume and checkpoint evaluation."""

import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from config import TrainConfig
from .approximator import (
    GaussianPolicy, QuantileEnsemble, critic_action_gradients, policy_forward, sample_action,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .envs import CmdpEnv, CmdpSpec, make_spec
from .errors import CheckpointError, ConfigError, NumericDivergenceError
from .evaluation import EvalSummary, cost_bias, evaluate_policy
from .learner import LagrangianState, Learner, LearnerHyper, TemperatureState, UpdateInfo
from .metrics import MetricsRecord, MetricsWriter, read_metrics
from .quantile_critics import TruncationSpec
from .replay import ReplayBuffer, Transition
from .step_control import TrustRegion, explore, recent_episode_cost, update_delta

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
METRICS_CSV = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.npz"
DIVERGED_FILE = "checkpoint_diverged.npz"

# order of the derived seeds
SEED_SLOTS = ("policy", "reward_critics", "cost_critics", "replay", "learner",
              "explore", "env", "eval")


def derive_seeds(seed: int) -> Dict[str, int]:
    state = np.random.SeedSequence(seed).generate_state(len(SEED_SLOTS))
    return {name: int(s) for name, s in zip(SEED_SLOTS, state)}


def build_spec(config: TrainConfig) -> CmdpSpec:
    env = config.env
    return make_spec(env.name, horizon=env.horizon, dt=env.dt, v_threshold=env.v_threshold,
                     ctrl_weight=env.ctrl_weight, noise_std=env.noise_std,
                     init_perturbation=env.init_perturbation)


def build_policy(config: TrainConfig, spec: CmdpSpec, seed: int) -> GaussianPolicy:
    net = config.network
    return GaussianPolicy(spec.obs_dim, spec.action_box.dim, net.policy_hidden, seed,
                          log_std_min=net.log_std_min, log_std_max=net.log_std_max)


@dataclass
class IntervalStats:
    """Accumulators reset after every metrics record."""
    episode_returns: List[float] = field(default_factory=list)
    episode_costs: List[float] = field(default_factory=list)
    explore_calls: int = 0
    unsafe_calls: int = 0
    conflicts: int = 0
    eta_sum: float = 0.0
    updates: List[UpdateInfo] = field(default_factory=list)

    def conflict_ratio(self) -> Optional[float]:
        return self.conflicts / self.unsafe_calls if self.unsafe_calls else None

    def unsafe_fraction(self) -> Optional[float]:
        return self.unsafe_calls / self.explore_calls if self.explore_calls else None

    def eta_mean(self) -> Optional[float]:
        return self.eta_sum / self.explore_calls if self.explore_calls else None

    def loss_means(self) -> Dict[str, Optional[float]]:
        def mean(values):
            finite = [v for v in values if math.isfinite(v)]
            return float(np.mean(finite)) if finite else None
        return {
            "reward_critic": mean([u.reward_loss for u in self.updates]),
            "cost_critic": mean([u.cost_loss for u in self.updates]),
            "actor": mean([u.actor_loss for u in self.updates]),
            "entropy": mean([u.entropy for u in self.updates]),
        }


def _mean(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


class TrainingLoop:
    """Single-threaded collect -> store -> update loop."""

    def __init__(self, config: TrainConfig, out_dir: Optional[str] = None):
        self.config = config
        self.out_dir = out_dir or config.run.out_dir
        self.seeds = derive_seeds(config.run.seed)
        self.spec = build_spec(config)
        self.action_box = self.spec.action_box
        obs_dim, act_dim = self.spec.obs_dim, self.action_box.dim

        critic, net, learner_cfg, exp = config.critic, config.network, config.learner, config.exploration
        self.policy = build_policy(config, self.spec, self.seeds["policy"])
        reward_critics = QuantileEnsemble(obs_dim, act_dim, critic.n_critics, critic.n_quantiles,
                                          net.critic_hidden, self.seeds["reward_critics"])
        cost_critics = QuantileEnsemble(obs_dim, act_dim, critic.n_critics, critic.n_quantiles,
                                        net.critic_hidden, self.seeds["cost_critics"])
        lagrangian = LagrangianState.from_limit(
            config.env.cost_limit, config.env.horizon, config.env.gamma,
            lam=learner_cfg.lambda_init, lr_lambda=learner_cfg.lambda_lr, alm_c=learner_cfg.alm_c)
        target_entropy = learner_cfg.target_entropy
        if target_entropy is None:
            target_entropy = -float(act_dim)
        temperature = TemperatureState(
            log_alpha=math.log(learner_cfg.init_temperature), target_entropy=target_entropy,
            lr=learner_cfg.entropy_lr, autotune=learner_cfg.entropy_autotune)
        hyper = LearnerHyper(
            gamma=config.env.gamma, truncation=TruncationSpec(critic.k_r, critic.k_c),
            kappa=critic.kappa, critic_lr=critic.lr, policy_lr=learner_cfg.policy_lr,
            beta_c=exp.beta_c, cvar_alpha=exp.cvar_alpha, use_alm=learner_cfg.use_alm,
            use_entropy_bonus=learner_cfg.use_entropy_bonus,
            target_update_frequency=learner_cfg.target_update_frequency)
        self.learner = Learner(self.policy, reward_critics, cost_critics, lagrangian, temperature,
                               hyper, self.action_box, learner_cfg.tau,
                               np.random.default_rng(self.seeds["learner"]))

        self.replay = ReplayBuffer(config.run.buffer_size, obs_dim, act_dim, self.seeds["replay"])
        self.trust_region = TrustRegion(exp.delta_init, exp.delta_max, exp.lr_delta, exp.delta_min)
        self.explore_rng = np.random.default_rng(self.seeds["explore"])
        self.envs = [CmdpEnv(self.spec, self.seeds["env"] + i) for i in range(config.run.num_envs)]
        self.observations = [env.state.copy() for env in self.envs]
        self.episode_return = [0.0] * len(self.envs)
        self.episode_cost = [0.0] * len(self.envs)

        self.step = 0
        self.iteration = 0
        self.stats = IntervalStats()
        self.metrics = MetricsWriter(os.path.join(self.out_dir, METRICS_FILE))
        self.last_eval: Optional[EvalSummary] = None
        # set when an eval interval is crossed; consumed by the next metrics record
        self.eval_due = False
        self._running = False
        self._started = time.monotonic()

    # -- acting ------------------------------------------------------------

    def select_action(self, obs: np.ndarray) -> np.ndarray:
        if self.step < self.config.run.initial_steps:
            return self.action_box.sample_uniform(self.explore_rng)
        out = policy_forward(self.policy, obs)
        if not self.config.exploration.enabled:
            action, _ = sample_action(out, self.explore_rng, self.action_box)
            return action

        exp = self.config.exploration
        grads, bounds = critic_action_gradients(
            *self.learner.live_critics, obs, exp.beta_r, exp.beta_c, exp.cvar_alpha,
            at_action=out.mu)
        decision = explore(out, grads, self.learner.lagrangian.lam, self.learner.lagrangian.d_q,
                           bounds.q_c_mean, self.trust_region, self.action_box)
        self.stats.explore_calls += 1
        self.stats.eta_sum += decision.eta_star
        if not decision.in_safe_region:
            self.stats.unsafe_calls += 1
            self.stats.conflicts += int(decision.conflicted)
        action, _ = sample_action(out, self.explore_rng, self.action_box, mean=decision.mu_E)
        return action

    def collect(self) -> None:
        """One transition from every environment, in order."""
        for i, env in enumerate(self.envs):
            obs = self.observations[i]
            action = self.select_action(obs)
            result = env.step(action)
            self.replay.add(Transition(
                state=obs, action=action, reward=result.reward, cost=result.cost,
                next_state=result.next_state, terminated=result.terminated,
                truncated=result.truncated, step_index=env.t - 1))
            self.episode_return[i] += result.reward
            self.episode_cost[i] += result.cost
            self.step += 1
            if result.terminated or result.truncated:
                self.stats.episode_returns.append(self.episode_return[i])
                self.stats.episode_costs.append(self.episode_cost[i])
                self.episode_return[i] = self.episode_cost[i] = 0.0
                self.observations[i] = env.reset()
            else:
                self.observations[i] = result.next_state

    # -- phases ------------------------------------------------------------

    def update_phase(self) -> None:
        learner_cfg = self.config.learner
        if self.step <= self.config.run.initial_steps or self.iteration % learner_cfg.update_every:
            return
        batches = [self.replay.sample(learner_cfg.batch_size)
                   for _ in range(learner_cfg.gradient_steps)]
        self.stats.updates.append(self.learner.update(batches, learner_cfg.policy_update_steps))

    def maybe_update_delta(self, previous_step: int) -> None:
        exp = self.config.exploration
        if not (exp.enabled and exp.delta_autotune) or self.step <= self.config.run.initial_steps:
            return
        if not _crossed(previous_step, self.step, exp.delta_update_interval):
            return
        recent = recent_episode_cost(self.replay.recent_costs(exp.recent_window),
                                     self.config.env.horizon)
        self.trust_region = update_delta(self.trust_region, recent, self.config.env.cost_limit)

    def evaluate(self) -> Dict[str, Optional[float]]:
        run = self.config.run
        summary = evaluate_policy(self.spec, self.policy, run.eval_episodes,
                                  self.seeds["eval"], self.config.env.cost_limit)
        self.last_eval = summary
        bias = cost_bias(self.spec, self.policy, self.learner.cost_critics,
                         summary.first_episode_states, run.bias_states, run.bias_rollouts,
                         self.config.env.gamma, self.seeds["eval"] + self.step)
        if summary.n_episodes:
            logger.info("评估 @%d: 回报 %.3f, 成本 %.3f, 违约率 %.2f", self.step,
                        summary.mean_return, summary.mean_cost, summary.violation_rate)
        return {"eval_return": summary.mean_return, "eval_cost": summary.mean_cost,
                "eval_violation_rate": summary.violation_rate, "cost_bias": bias}

    def log_record(self, with_eval: bool) -> MetricsRecord:
        stats = self.stats
        evaluation = self.evaluate() if with_eval else {}
        record = MetricsRecord(
            step=self.step,
            episode_return=_mean(stats.episode_returns),
            episode_cost=_mean(stats.episode_costs),
            lam=self.learner.lagrangian.lam,
            delta=self.trust_region.delta,
            temperature=self.learner.temperature.alpha,
            conflict_ratio=stats.conflict_ratio(),
            unsafe_fraction=stats.unsafe_fraction(),
            eta_star_mean=stats.eta_mean(),
            losses=stats.loss_means(),
            wall_time=time.monotonic() - self._started if self.config.run.log_wall_time else None,
            **evaluation,
        )
        self.eval_due = False
        self.metrics.append(record)
        logger.info("步数 %d: 训练成本 %s, lambda %.4f, delta %.4f", self.step,
                    "-" if record.episode_cost is None else f"{record.episode_cost:.2f}",
                    record.lam, record.delta)
        self.stats = IntervalStats()
        return record

    # -- main loop ---------------------------------------------------------

    def run(self) -> str:
        """Train until run.total_steps; returns the final checkpoint path."""
        run = self.config.run
        self._running = True
        logger.info("训练开始: 环境 %s, 种子 %d, 总步数 %d, COX %s", self.config.env.name,
                    run.seed, run.total_steps, "开启" if self.config.exploration.enabled else "关闭")
        try:
            while self._running and self.step < run.total_steps:
                previous = self.step
                self.collect()
                self.iteration += 1
                self.update_phase()
                self.maybe_update_delta(previous)
                if _crossed(previous, self.step, run.eval_interval):
                    self.eval_due = True
                if _crossed(previous, self.step, run.log_interval):
                    self.log_record(self.eval_due)
                    if run.checkpoint_interval and _crossed(previous, self.step,
                                                            run.checkpoint_interval):
                        self.save(os.path.join(self.out_dir, CHECKPOINT_FILE))
        except NumericDivergenceError:
            path = self.save(os.path.join(self.out_dir, DIVERGED_FILE))
            logger.error("数值发散, 已保存检查点 %s 并中止", path)
            raise

        if not self.metrics.records or self.metrics.records[-1].step != self.step:
            self.log_record(with_eval=True)
        path = self.save(os.path.join(self.out_dir, CHECKPOINT_FILE))
        self.metrics.export_csv(os.path.join(self.out_dir, METRICS_CSV))
        logger.info("训练完成: %d 步, 检查点 %s", self.step, path)
        return path

    def stop(self) -> None:
        """Stop after the current iteration."""
        self._running = False

    # -- persistence -------------------------------------------------------

    def save(self, path: str) -> str:
        arrays = {**self.learner.state_arrays(), **self.replay.state_arrays()}
        meta = {
            "config": self.config.to_dict(),
            "obs_dim": self.spec.obs_dim,
            "act_dim": self.action_box.dim,
            "step": self.step,
            "iteration": self.iteration,
            "eval_due": self.eval_due,
            "delta": self.trust_region.delta,
            "learner": self.learner.state_meta(),
            "replay": self.replay.state_meta(),
            "envs": [env.snapshot() for env in self.envs],
            "observations": [o.tolist() for o in self.observations],
            "episode_return": self.episode_return,
            "episode_cost": self.episode_cost,
            "explore_rng": self.explore_rng.bit_generator.state,
        }
        return save_checkpoint(path, arrays, meta)

    @classmethod
    def resume(cls, path: str, out_dir: Optional[str] = None,
               total_steps: Optional[int] = None) -> "TrainingLoop":
        """Rebuild a loop from a checkpoint; training continues bit-exactly."""
        arrays, meta = load_checkpoint(path)
        config = TrainConfig.from_dict(meta["config"])
        if total_steps is not None:
            config = config.with_overrides({"run.total_steps": total_steps})
        loop = cls(config, out_dir)
        loop._check_dims(meta)
        try:
            loop.learner.load_state(arrays, meta["learner"])
            loop.replay.load_state(arrays, meta["replay"])
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"检查点与配置不兼容: {e}") from e
        loop.trust_region = TrustRegion(meta["delta"], loop.trust_region.delta_max,
                                        loop.trust_region.lr_delta, loop.trust_region.delta_min)
        for env, snapshot in zip(loop.envs, meta["envs"]):
            env.restore(snapshot)
        loop.observations = [np.array(o) for o in meta["observations"]]
        loop.episode_return = list(meta["episode_return"])
        loop.episode_cost = list(meta["episode_cost"])
        loop.explore_rng.bit_generator.state = meta["explore_rng"]
        loop.step = int(meta["step"])
        loop.iteration = int(meta["iteration"])
        loop.eval_due = bool(meta.get("eval_due", False))
        metrics_path = loop.metrics.path
        if os.path.exists(metrics_path):
            kept = [r for r in read_metrics(metrics_path) if r.step <= loop.step]
            loop.metrics = MetricsWriter(metrics_path, kept)
        logger.info("已从 %s 恢复训练 (步数 %d)", path, loop.step)
        return loop

    def _check_dims(self, meta: Dict) -> None:
        expected = (self.spec.obs_dim, self.action_box.dim)
        found = (meta.get("obs_dim"), meta.get("act_dim"))
        if found != expected:
            raise CheckpointError(f"检查点维度 (obs, act)={found} 与环境 {expected} 不符")


def _crossed(previous: int, current: int, interval: int) -> bool:
    return current // interval > previous // interval


def run_train(config: Optional[TrainConfig], out_dir: Optional[str] = None,
              resume_from: Optional[str] = None, total_steps: Optional[int] = None) -> str:
    """Train (or resume) and return the final checkpoint path.

    A resumed run keeps the checkpoint's configuration; only `total_steps` may change.
    """
    if resume_from:
        loop = TrainingLoop.resume(resume_from, out_dir, total_steps=total_steps)
    else:
        loop = TrainingLoop(config, out_dir)
    return loop.run()


def load_policy(path: str):
    """Config, environment spec and target policy stored in a checkpoint."""
    arrays, meta = load_checkpoint(path)
    try:
        config = TrainConfig.from_dict(meta["config"])
    except (ConfigError, KeyError, TypeError) as e:
        raise CheckpointError(f"检查点配置无效: {e}") from e
    spec = build_spec(config)
    expected = (spec.obs_dim, spec.action_box.dim)
    found = (meta.get("obs_dim"), meta.get("act_dim"))
    if found != expected:
        raise CheckpointError(f"检查点维度 (obs, act)={found} 与环境 {expected} 不符")
    policy = build_policy(config, spec, seed=0)
    try:
        params = [arrays[f"policy/{i}"] for i in range(len(policy.params))]
        policy.set_params(params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"策略参数形状不匹配: {e}") from e
    return config, spec, policy


def run_eval(checkpoint: str, n_episodes: int, seed: int) -> EvalSummary:
    """Deterministic evaluation of the checkpoint's target policy."""
    config, spec, policy = load_policy(checkpoint)
    summary = evaluate_policy(spec, policy, n_episodes, seed, config.env.cost_limit)
    logger.info("评估完成: %d 个回合", summary.n_episodes)
    return summary
