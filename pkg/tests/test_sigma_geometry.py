import numpy as np
import pytest

from core.errors import InvalidInputError
from core.sigma_geometry import (
    ProjectionCase, detect_conflict, gram_scalars, project_mgda, sigma_inner,
)
from core.verify import cone_projection_oracle


def sigma_norm(u, sigma):
    return np.sqrt(sigma_inner(u, u, sigma))


class TestSigmaInner:
    def test_orthogonal_under_identity(self):
        assert sigma_inner([1, 0], [0, 1], [1, 1]) == 0.0

    def test_squared_norm(self):
        assert sigma_inner([1, 2], [1, 2], [1, 1]) == 5.0

    def test_weighted(self):
        assert sigma_inner([1, 2], [3, -1], [2, 0.5]) == pytest.approx(5.0)

    def test_symmetric_bitwise(self, rng):
        for _ in range(50):
            a, b = rng.normal(size=4), rng.normal(size=4)
            s = rng.uniform(0.1, 3.0, 4)
            assert sigma_inner(a, b, s) == sigma_inner(b, a, s)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            sigma_inner([1, 2], [1, 2, 3], [1, 1])


class TestGramScalars:
    def test_unit_axes(self):
        gram = gram_scalars([1, 0], [0, 1], [1, -1], [1, 1])
        assert (gram.s_rr, gram.s_cc, gram.s_rc) == (1.0, 1.0, 0.0)
        assert (gram.v_r, gram.v_c) == (1.0, 1.0)

    def test_zero_return_gradient(self):
        gram = gram_scalars([0, 0], [0, 1], [1, -1], [1, 1])
        assert gram.s_rr == 0.0
        assert gram.v_r == 0.0

    def test_matches_double_loop(self, rng):
        g_r, g_c, g_raw = rng.normal(size=(3, 4))
        sigma = rng.uniform(0.1, 2.0, 4)
        gram = gram_scalars(g_r, g_c, g_raw, sigma)
        loop = lambda a, b: sum(a[i] * sigma[i] * b[i] for i in range(4))
        assert gram.s_rr == pytest.approx(loop(g_r, g_r))
        assert gram.s_rc == pytest.approx(loop(g_r, -g_c))
        assert gram.s_cc == pytest.approx(loop(g_c, g_c))
        assert gram.v_c == pytest.approx(loop(-g_c, g_raw))
        assert gram.det >= -1e-12

    def test_rejects_nan(self):
        with pytest.raises(InvalidInputError):
            gram_scalars([np.nan, 0], [0, 1], [1, 1], [1, 1])

    def test_rejects_non_positive_covariance(self):
        with pytest.raises(InvalidInputError):
            gram_scalars([1, 0], [0, 1], [1, 1], [1, 0])


class TestDetectConflict:
    def test_inside_cone(self):
        assert not detect_conflict([1, 0], [0, 1], [1, -1], [1, 1]).conflicting

    def test_opposing_colinear(self):
        report = detect_conflict([1, 0], [1, 0], [-1, 0], [1, 1])
        assert report.v_r == -1.0
        assert report.conflicting

    def test_matches_sign_oracle(self, rng):
        for _ in range(100):
            g_r, g_c, g_raw = rng.normal(size=(3, 3))
            sigma = rng.uniform(0.1, 2.0, 3)
            v_r = sum(g_r * sigma * g_raw)
            v_c = sum(-g_c * sigma * g_raw)
            assert detect_conflict(g_r, g_c, g_raw, sigma).conflicting == (v_r < 0 or v_c < 0)


class TestProjectMgda:
    def test_in_cone(self):
        proj = project_mgda([1, 0], [0, 1], 1.0, [1, 1])
        np.testing.assert_array_equal(proj.g_star, [1, -1])
        assert proj.case_id is ProjectionCase.IN_CONE

    def test_colinear_half_space(self):
        proj = project_mgda([1, 0], [-1, 0], 1.0, [1, 1])
        np.testing.assert_allclose(proj.g_star, [2, 0])
        assert proj.case_id is ProjectionCase.COLINEAR_HALF_SPACE

    def test_opposed_colinear_collapses_to_hyperplane(self):
        proj = project_mgda([1, 1], [2, 2], 0.2, [1, 1])
        assert proj.case_id is ProjectionCase.COLINEAR_HYPERPLANE
        np.testing.assert_allclose(proj.g_star, [0, 0], atol=1e-12)

    def test_zero_raw_gradient(self):
        proj = project_mgda([1, 0], [1, 0], 1.0, [1, 1])
        assert proj.case_id is ProjectionCase.DEGENERATE_ZERO
        np.testing.assert_array_equal(proj.g_star, [0, 0])

    def test_matches_oracle_on_worked_instance(self):
        g_r, g_c, sigma = np.array([0.0, 1.0]), np.array([1.0, 2.0]), np.ones(2)
        proj = project_mgda(g_r, g_c, 1.0, sigma)
        oracle = cone_projection_oracle(g_r - g_c, [g_r, -g_c], sigma)
        assert sigma_norm(proj.g_star - oracle, sigma) < 1e-6

    def test_negative_lambda_rejected(self):
        with pytest.raises(InvalidInputError):
            project_mgda([1, 0], [0, 1], -0.1, [1, 1])

    @pytest.mark.parametrize("dim", [2, 3, 5])
    def test_random_instances_feasible_and_optimal(self, rng, dim):
        for _ in range(60):
            g_r = rng.normal(size=dim)
            g_c = rng.uniform(-1.5, 1.5) * g_r + 0.5 * rng.normal(size=dim)
            lam = rng.uniform(0.0, 5.0)
            sigma = rng.uniform(0.05, 3.0, dim)
            proj = project_mgda(g_r, g_c, lam, sigma)
            g_raw = g_r - lam * g_c
            scale = max(1.0, gram_scalars(g_r, g_c, g_raw, sigma).scale)
            slack_r = sigma_inner(g_r, proj.g_star, sigma)
            slack_c = sigma_inner(-g_c, proj.g_star, sigma)
            assert slack_r >= -1e-8 * scale
            assert slack_c >= -1e-8 * scale
            assert proj.mu_r >= 0.0 and proj.mu_c >= 0.0
            assert abs(proj.mu_r * slack_r) <= 1e-6 * scale
            assert abs(proj.mu_c * slack_c) <= 1e-6 * scale
            oracle = cone_projection_oracle(g_raw, [g_r, -g_c], sigma)
            assert sigma_norm(proj.g_star - oracle, sigma) <= 1e-6 * max(1.0, sigma_norm(g_raw, sigma))

    def test_idempotent_inside_cone(self, rng):
        for _ in range(30):
            g_r, g_c = rng.normal(size=(2, 3))
            sigma = rng.uniform(0.1, 2.0, 3)
            proj = project_mgda(g_r, g_c, 0.7, sigma)
            if proj.case_id is ProjectionCase.IN_CONE:
                np.testing.assert_array_equal(proj.g_star, g_r - 0.7 * g_c)

    def test_scale_equivariance(self, rng):
        for _ in range(30):
            g_r, g_c = rng.normal(size=(2, 3))
            sigma = rng.uniform(0.1, 2.0, 3)
            t = rng.uniform(0.1, 10.0)
            base = project_mgda(g_r, g_c, 1.3, sigma).g_star
            scaled = project_mgda(t * g_r, t * g_c, 1.3, sigma).g_star
            np.testing.assert_allclose(scaled, t * base, rtol=1e-9, atol=1e-12)
