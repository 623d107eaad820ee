import numpy as np
import pytest

from core.approximator import ActionBox, GaussianPolicy, Optimizer, QuantileEnsemble, predict_atoms
from core.errors import InvalidInputError
from core.learner import (
    Batch, LagrangianState, Learner, LearnerHyper, TargetNetworks, TemperatureState,
    actor_update, alm_penalty, convert_limit, critic_update, lambda_update, polyak_update,
    temperature_update,
)
from core.quantile_critics import TruncationSpec
from core.verify import central_difference, relative_error

BOX = ActionBox(low=[-1.0], high=[1.0])


def single_state_batch(size, reward=1.0, cost=0.0, terminated=0.0, rng=None):
    rng = rng or np.random.default_rng(0)
    states = np.ones((size, 1))
    return Batch(
        states=states,
        actions=rng.uniform(-1.0, 1.0, size=(size, 1)),
        rewards=np.full(size, reward),
        costs=np.full(size, cost),
        next_states=states.copy(),
        terminated=np.full(size, terminated),
    )


def make_learner(seed=0, **hyper):
    policy = GaussianPolicy(1, 1, (16,), seed)
    reward = QuantileEnsemble(1, 1, 2, 3, (16,), seed + 1)
    cost = QuantileEnsemble(1, 1, 2, 3, (16,), seed + 2)
    defaults = dict(gamma=0.5, truncation=TruncationSpec(0, 0), beta_c=1.0, cvar_alpha=2)
    defaults.update(hyper)
    return Learner(
        policy, reward, cost,
        LagrangianState.from_limit(5.0, 20, 0.5, lam=0.5, lr_lambda=1e-2),
        TemperatureState(log_alpha=np.log(0.05), target_entropy=-1.0, lr=1e-3),
        LearnerHyper(**defaults), BOX, tau=0.05, rng=np.random.default_rng(seed),
    )


class TestConvertLimit:
    def test_long_horizon(self):
        assert convert_limit(25.0, 1000, 0.99) == pytest.approx(2.49989, abs=1e-4)

    def test_sparse_goal_setting(self):
        assert convert_limit(10.0, 400, 0.975) == pytest.approx(0.99996, abs=1e-4)

    def test_myopic_limit(self):
        assert convert_limit(10.0, 400, 0.0) == pytest.approx(10.0 / 400)

    def test_rejects_unit_discount(self):
        with pytest.raises(InvalidInputError):
            convert_limit(10.0, 400, 1.0)


class TestDualUpdates:
    state = LagrangianState(lam=1.0, lr_lambda=0.1, alm_c=10.0, d_q=2.0, d_episode=20.0)

    def test_stationary_at_cap(self):
        assert lambda_update(self.state, 2.0).lam == 1.0

    def test_increases_over_cap(self):
        assert lambda_update(self.state, 3.0).lam > 1.0

    def test_projected_at_zero(self):
        zero = LagrangianState(lam=0.0, lr_lambda=0.1, alm_c=10.0, d_q=2.0, d_episode=20.0)
        assert lambda_update(zero, 0.0).lam == 0.0

    def test_temperature_fixed_at_target(self):
        temp = TemperatureState(log_alpha=0.3, target_entropy=-1.0, lr=0.1)
        assert temperature_update(temp, [1.0, 1.0]).log_alpha == pytest.approx(0.3)

    def test_temperature_drops_when_entropy_high(self):
        temp = TemperatureState(log_alpha=0.3, target_entropy=-1.0, lr=0.1)
        assert temperature_update(temp, [-2.0, -2.0]).log_alpha < 0.3

    def test_temperature_frozen_without_autotune(self):
        temp = TemperatureState(log_alpha=0.3, target_entropy=-1.0, lr=0.1, autotune=False)
        assert temperature_update(temp, [-5.0]) is temp


class TestPolyak:
    def test_unit_rate_copies(self):
        live = QuantileEnsemble(1, 1, 1, 2, (4,), seed=0)
        shadow = TargetNetworks(QuantileEnsemble(1, 1, 1, 2, (4,), seed=1), tau=1.0)
        updated = polyak_update(shadow, live.params)
        for a, b in zip(updated.params, live.params):
            np.testing.assert_array_equal(a, b)

    def test_zero_rate_keeps_shadow(self):
        live = QuantileEnsemble(1, 1, 1, 2, (4,), seed=0)
        shadow = TargetNetworks(QuantileEnsemble(1, 1, 1, 2, (4,), seed=1), tau=0.0)
        updated = polyak_update(shadow, live.params)
        for a, b in zip(updated.params, shadow.params):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        shadow = TargetNetworks.track(QuantileEnsemble(1, 1, 1, 2, (4,), seed=0), tau=0.5)
        with pytest.raises(InvalidInputError):
            polyak_update(shadow, QuantileEnsemble(1, 1, 1, 3, (4,), seed=0).params)


class TestAlmPenalty:
    def test_zero_at_boundary(self):
        value, grad = alm_penalty(np.array([2.0]), 1.5, 10.0, 2.0)
        assert value[0] == 0.0
        assert grad[0] == 1.5

    def test_continuous_at_switch(self):
        lam, c, d = 2.0, 4.0, 1.0
        switch = d - lam / c
        below, _ = alm_penalty(np.array([switch - 1e-9]), lam, c, d)
        above, _ = alm_penalty(np.array([switch + 1e-9]), lam, c, d)
        assert below[0] == pytest.approx(above[0], abs=1e-8)
        assert below[0] == pytest.approx(-lam * lam / (2 * c))

    def test_inactive_has_zero_gradient(self):
        _, grad = alm_penalty(np.array([-10.0]), 1.0, 10.0, 0.0)
        assert grad[0] == 0.0

    def test_plain_lagrangian(self):
        value, grad = alm_penalty(np.array([3.0]), 0.5, 10.0, 1.0, use_alm=False)
        assert value[0] == pytest.approx(1.0)
        assert grad[0] == 0.5


class TestCriticUpdate:
    def test_empty_batch_rejected(self):
        learner = make_learner()
        empty = single_state_batch(0)
        with pytest.raises(InvalidInputError):
            learner.critic_step(empty)

    def test_terminal_targets_ignore_next_atoms(self):
        losses = []
        for target_seed in (10, 20):
            learner = make_learner(seed=0)
            targets = (
                TargetNetworks.track(QuantileEnsemble(1, 1, 2, 3, (16,), target_seed, 0.5), 0.05),
                TargetNetworks.track(QuantileEnsemble(1, 1, 2, 3, (16,), target_seed + 1, 0.5), 0.05),
            )
            optimizers = (Optimizer.for_params(learner.reward_critics.params, 1e-3),
                          Optimizer.for_params(learner.cost_critics.params, 1e-3))
            result = critic_update(
                single_state_batch(8, terminated=1.0), learner.policy, learner.live_critics,
                targets, optimizers, learner.temperature, learner.hyper, BOX,
                np.random.default_rng(3))
            losses.append((result.reward_loss, result.cost_loss))
        assert losses[0] == losses[1]

    @pytest.mark.slow
    def test_geometric_series_fixed_point(self):
        learner = make_learner(seed=4, critic_lr=1e-2, use_entropy_bonus=False)
        rng = np.random.default_rng(5)
        for step in range(2000):
            if step == 1200:
                learner.reward_optimizer.lr = 1e-3
            learner.critic_step(single_state_batch(32, rng=rng))
        for action in (-0.8, 0.0, 0.8):
            atoms = predict_atoms(learner.reward_critics, np.ones(1), np.array([action])).atoms
            np.testing.assert_allclose(atoms, 2.0, atol=0.05)


class TestActorUpdate:
    def test_step_changes_policy_and_reports(self):
        learner = make_learner(seed=1)
        before = [p.copy() for p in learner.policy.params]
        losses = actor_update(
            single_state_batch(16), learner.policy, learner.live_critics, learner.lagrangian,
            learner.temperature, learner.policy_optimizer, learner.hyper, BOX,
            np.random.default_rng(2))
        assert np.isfinite(losses.actor_loss)
        assert losses.log_probs.shape == (16,)
        assert 0.0 <= losses.penalty_active <= 1.0
        assert any(not np.array_equal(a, b) for a, b in zip(before, learner.policy.params))

    def test_learner_steps_update_dual_variables(self):
        learner = make_learner(seed=2)
        info = learner.update([single_state_batch(8), single_state_batch(8)], policy_steps=1)
        assert learner.critic_steps == 2
        assert learner.actor_steps == 1
        assert np.isfinite(info.actor_loss)
        assert learner.lagrangian.lam >= 0.0


class TestLearnerState:
    def test_restore_reproduces_parameters(self):
        source = make_learner(seed=3)
        source.update([single_state_batch(8)], policy_steps=1)
        target = make_learner(seed=9)
        target.load_state(source.state_arrays(), source.state_meta())
        for a, b in zip(source.policy.params, target.policy.params):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(source.cost_targets.params, target.cost_targets.params):
            np.testing.assert_array_equal(a, b)
        assert target.lagrangian.lam == source.lagrangian.lam
        assert target.policy_optimizer.state.t == 1
        assert target.rng.random() == source.rng.random()

    def test_missing_tensor_rejected(self):
        source = make_learner()
        arrays = source.state_arrays()
        del arrays["policy/0"]
        with pytest.raises(InvalidInputError):
            make_learner().load_state(arrays, source.state_meta())

class _RecordingOptimizer(Optimizer):
    """Keeps the gradients it is handed and leaves the parameters alone."""

    def step(self, params, grads):
        self.grads = [np.array(g) for g in grads]
        return [np.array(p) for p in params]


def test_actor_gradient_matches_finite_differences_with_active_penalty():
    policy = GaussianPolicy(2, 1, (8,), seed=4, output_scale=0.5)
    critics = (QuantileEnsemble(2, 1, 2, 5, (8,), seed=5, output_scale=0.5),
               QuantileEnsemble(2, 1, 2, 5, (8,), seed=6, output_scale=0.5))
    # d_q far below any cost estimate keeps every sample on the quadratic branch
    lagrangian = LagrangianState(lam=1.0, lr_lambda=0.0, alm_c=10.0, d_q=-5.0, d_episode=0.0)
    temperature = TemperatureState(log_alpha=np.log(0.1), target_entropy=-1.0, lr=0.0)
    hyper = LearnerHyper(gamma=0.9, truncation=TruncationSpec(0, 0), beta_c=1.0, cvar_alpha=3)
    wide = ActionBox(low=[-10.0], high=[10.0])
    states = np.random.default_rng(7).normal(size=(6, 2))
    batch = Batch(states=states, actions=np.zeros((6, 1)), rewards=np.zeros(6),
                  costs=np.zeros(6), next_states=states, terminated=np.zeros(6))
    optimizer = _RecordingOptimizer.for_params(policy.params, 0.0)

    def run():
        return actor_update(batch, policy, critics, lagrangian, temperature, optimizer, hyper,
                            wide, np.random.default_rng(5))

    losses = run()
    assert losses.penalty_active == 1.0
    analytic = optimizer.grads
    base = [np.array(p) for p in policy.params]
    for j in range(len(base)):
        def loss_at(x, j=j):
            params = [p.copy() for p in base]
            params[j] = x
            policy.set_params(params)
            return run().actor_loss

        numeric = central_difference(loss_at, base[j])
        assert relative_error(analytic[j], numeric) < 1e-4
    policy.set_params(base)
