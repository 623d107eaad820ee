import numpy as np
import pytest

from core.errors import InvalidInputError, NumericDivergenceError
from core.quantile_critics import (
    Objective, QuantileAtoms, TruncationSpec, bellman_target, cost_bounds, cost_lb_atom_grad,
    critic_bounds, quantile_huber_loss, quantile_stats, reward_upper_bound, tau_levels,
    truncate_mix,
)
from core.verify import central_difference


def test_tau_levels_are_midpoints():
    np.testing.assert_allclose(tau_levels(4), [0.125, 0.375, 0.625, 0.875])


def test_atoms_reject_non_finite():
    with pytest.raises(NumericDivergenceError):
        QuantileAtoms(np.array([[0.0, np.inf]]))


class TestStats:
    def test_single_critic_has_zero_std(self, rng):
        _, std = quantile_stats(rng.normal(size=(1, 6)))
        np.testing.assert_array_equal(std, np.zeros(6))

    def test_population_std(self):
        mean, std = quantile_stats(np.array([[2.0], [4.0]]))
        assert mean[0] == 3.0
        assert std[0] == 1.0


class TestCostBounds:
    atoms = np.array([[0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 2.0, 5.0]])

    def test_worked_example(self):
        lb, ub, mean = cost_bounds(self.atoms, 1.0, 2)
        assert lb == pytest.approx(2.5)
        assert ub == pytest.approx(3.5)
        assert mean == pytest.approx(1.75)

    def test_degenerate_ensemble_is_cvar(self):
        single = self.atoms[:1]
        lb, ub, _ = cost_bounds(single, 0.0, 2)
        assert lb == ub == pytest.approx(2.5)

    def test_full_tail_is_mean(self):
        lb, _, mean = cost_bounds(self.atoms, 0.0, 4)
        assert lb == pytest.approx(mean)

    def test_alpha_out_of_range(self):
        with pytest.raises(InvalidInputError):
            cost_bounds(self.atoms, 1.0, 5)
        with pytest.raises(InvalidInputError):
            cost_bounds(self.atoms, 1.0, 0)

    def test_batched_matches_single(self, rng):
        batch = rng.normal(size=(3, 2, 4))
        lbs, ubs, means = cost_bounds(batch, 1.5, 3)
        for i in range(3):
            lb, ub, mean = cost_bounds(batch[i], 1.5, 3)
            assert lbs[i] == pytest.approx(lb)
            assert ubs[i] == pytest.approx(ub)
            assert means[i] == pytest.approx(mean)

    def test_bounds_bracket_head_mean(self, rng):
        for _ in range(200):
            n, m = int(rng.integers(1, 6)), int(rng.integers(1, 12))
            atoms = rng.normal(size=(n, m)) * rng.uniform(0.1, 5.0)
            alpha = int(rng.integers(1, m + 1))
            lb, ub, _ = cost_bounds(atoms, rng.uniform(0.0, 4.0), alpha)
            head_mean = atoms.mean(axis=0)[m - alpha:].mean()
            assert lb <= head_mean + 1e-12
            assert head_mean <= ub + 1e-12

    def test_cvar_non_increasing_in_alpha(self, rng):
        for _ in range(50):
            n, m = int(rng.integers(1, 6)), int(rng.integers(2, 16))
            # well separated quantile levels keep both per-quantile bands ascending
            centres = np.cumsum(rng.uniform(1.0, 2.0, m))
            atoms = centres + rng.uniform(0.0, 0.02, m) * rng.normal(size=(n, m))
            beta = rng.uniform(0.0, 2.0)
            lbs, ubs = zip(*(cost_bounds(atoms, beta, a)[:2] for a in range(1, m + 1)))
            assert np.all(np.diff(lbs) <= 1e-12)
            assert np.all(np.diff(ubs) <= 1e-12)

    def test_lower_bound_atom_gradient(self, rng):
        atoms = rng.normal(size=(3, 5))
        numeric = central_difference(lambda a: cost_bounds(a, 2.0, 3)[0], atoms)
        np.testing.assert_allclose(cost_lb_atom_grad(atoms, 2.0, 3), numeric, atol=1e-7)


class TestRewardUpperBound:
    def test_no_optimism_is_mean(self, rng):
        atoms = rng.normal(size=(3, 5))
        ub, mean = reward_upper_bound(atoms, 0.0)
        assert ub == pytest.approx(mean)

    def test_substitution(self):
        ub, _ = reward_upper_bound(np.array([[2.0], [4.0]]), 2.0)
        assert ub == pytest.approx(5.0)

    def test_critic_bounds_bundle(self):
        bounds = critic_bounds(np.array([[2.0], [4.0]]), TestCostBounds.atoms, 2.0, 1.0, 2)
        assert bounds.q_r_ub == pytest.approx(5.0)
        assert bounds.q_r_mean == pytest.approx(3.0)
        assert bounds.q_c_lb == pytest.approx(2.5)
        assert bounds.alpha == 2


class TestTruncateMix:
    atoms = np.array([[1.0, 3.0, 5.0], [2.0, 4.0, 6.0]])

    def test_reward_drops_largest(self):
        np.testing.assert_array_equal(
            truncate_mix(self.atoms, TruncationSpec(k_r=2), Objective.REWARD), [1, 2, 3, 4])

    def test_cost_drops_smallest(self):
        np.testing.assert_array_equal(
            truncate_mix(self.atoms, TruncationSpec(k_c=2), Objective.COST), [3, 4, 5, 6])

    def test_identity_truncation(self):
        np.testing.assert_array_equal(
            truncate_mix(self.atoms, TruncationSpec(), Objective.REWARD), [1, 2, 3, 4, 5, 6])

    def test_rejects_dropping_whole_pool(self):
        with pytest.raises(InvalidInputError):
            truncate_mix(self.atoms, TruncationSpec(k_c=6), Objective.COST)

    def test_truncation_bias_direction(self, rng):
        for _ in range(500):
            n, m = int(rng.integers(1, 5)), int(rng.integers(1, 8))
            pool = rng.normal(size=(n, m))
            k = int(rng.integers(1, n * m)) if n * m > 1 else 0
            full = np.sort(pool.ravel())
            cost = truncate_mix(pool, TruncationSpec(k_c=k), Objective.COST)
            reward = truncate_mix(pool, TruncationSpec(k_r=k), Objective.REWARD)
            assert cost.mean() >= full.mean() - 1e-12
            assert reward.mean() <= full.mean() + 1e-12
            for kept in (cost, reward):
                assert np.all(np.diff(kept) >= 0.0)
                assert np.all(np.isin(kept, full))

    def test_batch_axes_preserved(self, rng):
        kept = truncate_mix(rng.normal(size=(7, 2, 3)), TruncationSpec(k_r=1), Objective.REWARD)
        assert kept.shape == (7, 5)
        assert np.all(np.diff(kept, axis=-1) >= 0.0)


class TestBellmanTarget:
    def test_terminal_ignores_next_atoms(self):
        np.testing.assert_array_equal(bellman_target(2.0, True, 0.9, [100.0, -7.0]), [2.0, 2.0])

    def test_discounted(self):
        np.testing.assert_allclose(bellman_target(1.0, False, 0.5, [2.0, 4.0]), [2.0, 3.0])

    def test_batched_matches_loop(self, rng):
        signal, done = rng.normal(size=4), rng.integers(0, 2, size=4)
        nxt = rng.normal(size=(4, 6))
        targets = bellman_target(signal, done, 0.99, nxt)
        for i in range(4):
            expected = [signal[i] + (1 - done[i]) * 0.99 * z for z in nxt[i]]
            np.testing.assert_allclose(targets[i], expected)

    def test_rejects_unit_discount(self):
        with pytest.raises(InvalidInputError):
            bellman_target(1.0, False, 1.0, [0.0])


class TestQuantileHuberLoss:
    def test_exact_prediction(self):
        loss, grad = quantile_huber_loss(np.array([[1.0, 1.0]]), np.array([1.0, 1.0]))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros((1, 2)))

    def test_linear_region(self):
        loss, _ = quantile_huber_loss(np.array([[0.0]]), np.array([2.0]), kappa=1.0)
        assert loss == pytest.approx(0.75)

    def test_gradient_matches_finite_difference(self, rng):
        pred = rng.normal(size=(2, 2, 3))
        targets = rng.normal(size=(2, 5)) * 2.0
        _, grad = quantile_huber_loss(pred, targets, 0.7)
        numeric = central_difference(lambda p: quantile_huber_loss(p, targets, 0.7)[0], pred)
        np.testing.assert_allclose(grad, numeric, atol=1e-6)

    def test_rejects_non_positive_kappa(self):
        with pytest.raises(InvalidInputError):
            quantile_huber_loss(np.zeros((1, 1)), np.zeros(1), kappa=0.0)
