import os

import numpy as np
import pytest

from config import PRESETS, TrainConfig
from core.errors import CheckpointError
from core.envs import dp_constrained_optimum, mc_oracle
from core.evaluation import cost_bias, deterministic_action, evaluate_policy, write_episodes
from core.learner import convert_limit
from core.training import (
    CHECKPOINT_FILE, METRICS_CSV, METRICS_FILE, TrainingLoop, build_policy, build_spec,
    derive_seeds, load_policy, run_eval, run_train,
)
from core.approximator import QuantileEnsemble, predict_atoms


def read(path):
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def test_seed_slots_are_distinct():
    seeds = derive_seeds(0)
    assert len(set(seeds.values())) == len(seeds)
    assert derive_seeds(0) == seeds


def test_random_phase_only(tiny_config, tmp_path):
    config = tiny_config.with_overrides({"run.total_steps": 30})
    loop = TrainingLoop(config, str(tmp_path / "random"))
    loop.run()
    assert len(loop.replay) == 30
    assert loop.learner.critic_steps == 0
    assert loop.learner.actor_steps == 0


def test_training_writes_outputs(tiny_config, tmp_path):
    out = str(tmp_path / "run")
    loop = TrainingLoop(tiny_config, out)
    path = loop.run()
    assert path == os.path.join(out, CHECKPOINT_FILE)
    assert os.path.exists(os.path.join(out, METRICS_CSV))
    records = loop.metrics.records
    assert [r.step for r in records] == [40, 80, 120]
    # the eval boundary at step 60 is served by the record at step 80
    assert records[0].eval_return is None
    assert records[1].eval_return is not None
    assert records[2].eval_return is not None
    assert loop.learner.critic_steps == 120 - 30
    assert records[-1].losses["reward_critic"] is not None
    assert records[-1].unsafe_fraction is not None


def test_same_seed_same_metrics(tiny_config, tmp_path):
    first = str(tmp_path / "a")
    second = str(tmp_path / "b")
    run_train(tiny_config, out_dir=first)
    run_train(tiny_config, out_dir=second)
    assert read(os.path.join(first, METRICS_FILE)) == read(os.path.join(second, METRICS_FILE))


def test_resume_matches_uninterrupted_run(tiny_config, tmp_path):
    straight = str(tmp_path / "straight")
    run_train(tiny_config.with_overrides({"run.total_steps": 200}), out_dir=straight)

    split = str(tmp_path / "split")
    checkpoint = run_train(tiny_config, out_dir=split)
    run_train(None, out_dir=split, resume_from=checkpoint, total_steps=200)

    assert read(os.path.join(split, METRICS_FILE)) == read(os.path.join(straight, METRICS_FILE))


def test_without_cox_exploration(tiny_config, tmp_path):
    config = tiny_config.with_overrides({"exploration.enabled": False})
    loop = TrainingLoop(config, str(tmp_path / "plain"))
    loop.run()
    assert loop.metrics.records[-1].unsafe_fraction is None
    assert loop.trust_region.delta == config.exploration.delta_init


def test_sparse_goal_smoke(tiny_config, tmp_path):
    config = tiny_config.with_overrides({"env.name": "toy_sparse_goal", "env.gamma": 0.975})
    loop = TrainingLoop(config, str(tmp_path / "sparse"))
    loop.run()
    assert loop.spec.obs_dim == 1
    assert len(loop.metrics.records) == 3


class TestEvaluation:
    def test_checkpoint_evaluation_is_reproducible(self, tiny_config, tmp_path):
        checkpoint = run_train(tiny_config, out_dir=str(tmp_path / "run"))
        first = run_eval(checkpoint, 3, seed=7)
        second = run_eval(checkpoint, 3, seed=7)
        assert first.to_dict() == second.to_dict()
        assert first.n_episodes == 3

    def test_zero_episodes(self, tiny_config, tmp_path):
        checkpoint = run_train(tiny_config, out_dir=str(tmp_path / "run"))
        summary = run_eval(checkpoint, 0, seed=1)
        assert summary.to_dict() == {"n_episodes": 0, "mean_return": None, "median_return": None,
                                     "mean_cost": None, "violation_rate": None}

    def test_untrained_policy_stays_slow(self):
        config = TrainConfig()
        spec = build_spec(config)
        policy = build_policy(config, spec, seed=0)
        summary = evaluate_policy(spec, policy, 3, seed=0, cost_limit=config.env.cost_limit)
        assert abs(summary.mean_return) < 2.0
        assert summary.mean_cost == 0.0
        assert summary.violation_rate == 0.0
        assert all(e.length == spec.horizon for e in summary.episodes)

    def test_episode_log(self, tmp_path):
        config = TrainConfig.from_dict({"env": {"horizon": 10}})
        spec = build_spec(config)
        summary = evaluate_policy(spec, build_policy(config, spec, 0), 2, 5, 1.0)
        path = write_episodes(str(tmp_path / "episodes.jsonl"), summary)
        lines = read(path).strip().split("\n")
        assert len(lines) == 2
        assert '"seed": 6' in lines[1]

    def test_cost_bias_is_finite(self):
        config = TrainConfig.from_dict({"env": {"horizon": 10}})
        spec = build_spec(config)
        policy = build_policy(config, spec, 0)
        summary = evaluate_policy(spec, policy, 1, 0, 1.0)
        critics = QuantileEnsemble(2, 1, 2, 4, (8,), seed=3)
        bias = cost_bias(spec, policy, critics, summary.first_episode_states, 3, 2, 0.9, seed=0)
        assert np.isfinite(bias)
        assert cost_bias(spec, policy, critics, [], 3, 2, 0.9, seed=0) is None

    def test_incompatible_checkpoint(self, tiny_config, tmp_path):
        checkpoint = run_train(tiny_config, out_dir=str(tmp_path / "run"))
        with pytest.raises(CheckpointError):
            load_policy(str(tmp_path / "missing.npz"))
        config, spec, policy = load_policy(checkpoint)
        assert spec.obs_dim == 2
        assert len(policy.params) == 4


def test_default_run_settings_give_identical_metrics(tiny_config, tmp_path):
    data = tiny_config.to_dict()
    del data["run"]["log_wall_time"]
    config = TrainConfig.from_dict(data)
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    run_train(config, out_dir=first)
    run_train(config, out_dir=second)
    text = read(os.path.join(first, METRICS_FILE))
    assert '"wall_time": null' in text
    assert text == read(os.path.join(second, METRICS_FILE))


# Full-length runs of the velocity preset; select with -m acceptance.

ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)
_finished = {}


def velocity_run(seed, cox, out_root):
    key = (seed, cox)
    if key not in _finished:
        config = TrainConfig.from_dict(PRESETS["velocity"]).with_overrides(
            {"run.seed": seed, "exploration.enabled": cox})
        loop = TrainingLoop(config, str(out_root / f"seed{seed}_{'cox' if cox else 'plain'}"))
        loop.run()
        _finished[key] = loop
    return _finished[key]


@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def training_cost(loop):
    """Mean training episode cost over the second half of the run."""
    half = loop.config.run.total_steps / 2
    costs = [r.episode_cost for r in loop.metrics.records
             if r.step > half and r.episode_cost is not None]
    return float(np.mean(costs))


@pytest.mark.slow
@pytest.mark.acceptance
@pytest.mark.parametrize("seed", ACCEPTANCE_SEEDS)
def test_velocity_training_respects_budget(seed, out_root):
    loop = velocity_run(seed, True, out_root)
    config = loop.config
    limit = config.env.cost_limit
    final = evaluate_policy(loop.spec, loop.learner.policy, config.run.eval_episodes,
                            seed=10_000 + seed, cost_limit=limit)
    assert final.mean_cost <= limit + 1.0
    assert training_cost(loop) <= 1.5 * limit

    noise_free = build_spec(config.with_overrides({"env.noise_std": 0.0}))
    optimum = dp_constrained_optimum(noise_free, 100, limit)
    assert final.mean_return >= 0.8 * optimum.best_return


@pytest.mark.slow
@pytest.mark.acceptance
def test_cox_does_not_raise_training_cost(out_root):
    with_cox = np.mean([training_cost(velocity_run(s, True, out_root)) for s in ACCEPTANCE_SEEDS])
    plain = np.mean([training_cost(velocity_run(s, False, out_root)) for s in ACCEPTANCE_SEEDS])
    assert with_cox <= 1.05 * plain


@pytest.mark.slow
@pytest.mark.acceptance
@pytest.mark.parametrize("seed", ACCEPTANCE_SEEDS)
def test_cost_estimate_converges_to_rollouts(seed, out_root):
    loop = velocity_run(seed, True, out_root)
    config = loop.config
    biased = [r for r in loop.metrics.records if r.cost_bias is not None]
    quarter = config.run.total_steps / 4
    spread = [np.mean([abs(r.cost_bias) for r in biased if q * quarter < r.step <= (q + 1) * quarter])
              for q in (1, 2, 3)]
    assert spread[0] >= spread[1] >= spread[2]

    spec, policy, critics = loop.spec, loop.learner.policy, loop.learner.cost_critics
    act = deterministic_action(policy, spec)
    visited = evaluate_policy(spec, policy, 1, seed=20_000 + seed,
                              cost_limit=config.env.cost_limit).first_episode_states
    estimates, rollouts = [], []
    for k, (t, state) in enumerate(visited[::20]):
        action = act(state)
        estimates.append(float(predict_atoms(critics, state, action).atoms.mean()))
        rollouts.append(mc_oracle(spec, act, state, action, 32, config.env.gamma,
                                  horizon=spec.horizon - t, seed=k, t0=t).mean_cost)
    # relative to the discounted cap when the rollouts see almost no cost
    scale = max(float(np.mean(rollouts)),
                convert_limit(config.env.cost_limit, config.env.horizon, config.env.gamma))
    assert abs(np.mean(estimates) - np.mean(rollouts)) <= 0.15 * scale
