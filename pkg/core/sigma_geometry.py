"""Sigma-metric gradient algebra and Policy-MGDA cone projection.

All vectors live in action space. The metric is induced by the diagonal
covariance of the target policy: <a, b>_S = sum_i a_i * S_i * b_i.

The exploration cone is K = {u : <g_r, u>_S >= 0, <-g_c, u>_S >= 0}. Internally
the two constraint normals are g_1 = g_r and g_2 = -g_c, and the projection of
g_raw = g_r - lambda * g_c onto K is written u = g_raw + mu_1 g_1 + mu_2 g_2 with
non-negative KKT multipliers mu_1 (return constraint) and mu_2 (cost constraint).
"""

from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError

# A normal whose sigma-norm is below this constrains nothing.
ZERO_NORM = 1e-12
# det(G) <= COLINEAR_RTOL * s_rr * s_cc marks the pair as co-linear.
COLINEAR_RTOL = 1e-10
# Both-active multipliers below this trigger the exhaustive active-set fallback.
MULTIPLIER_FLOOR = -1e-9


def as_gradient(values: Sequence[float], dim: Optional[int] = None) -> np.ndarray:
    """Validate and convert an action-space gradient."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"梯度必须是一维向量, 实际维度 {arr.ndim}")
    if dim is not None and arr.shape[0] != dim:
        raise InvalidInputError(f"梯度长度 {arr.shape[0]} 与动作维度 {dim} 不一致")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("梯度包含 NaN 或 Inf")
    return arr


def as_covariance(diag: Sequence[float], dim: Optional[int] = None) -> np.ndarray:
    """Validate and convert the diagonal of a policy covariance."""
    arr = as_gradient(diag, dim)
    if np.any(arr <= 0.0):
        raise InvalidInputError("协方差对角元必须严格为正")
    return arr


def sigma_inner(a: Sequence[float], b: Sequence[float], sigma: Sequence[float]) -> float:
    """Sigma-metric inner product; exactly symmetric in a and b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (a.shape == b.shape == sigma.shape) or a.ndim != 1:
        raise InvalidInputError(
            f"维度不匹配: a{a.shape}, b{b.shape}, sigma{sigma.shape}"
        )
    return float(np.dot(a * b, sigma))


@dataclass(frozen=True)
class GramScalars:
    """Sigma-Gram entries of (g_r, -g_c) and their correlations with g_raw."""
    s_rr: float
    s_rc: float
    s_cc: float
    v_r: float
    v_c: float
    det: float

    @property
    def scale(self) -> float:
        """Largest Gram magnitude, used to scale tolerances."""
        return max(abs(self.s_rr), abs(self.s_rc), abs(self.s_cc),
                   abs(self.v_r), abs(self.v_c))

    @property
    def is_colinear(self) -> bool:
        return self.det <= COLINEAR_RTOL * self.s_rr * self.s_cc


class ProjectionCase(Enum):
    """Which branch of the cone projection produced the result."""
    IN_CONE = "in_cone"
    ONLY_RETURN_ACTIVE = "only_return_active"
    ONLY_COST_ACTIVE = "only_cost_active"
    BOTH_ACTIVE = "both_active"
    COLINEAR_HALF_SPACE = "colinear_half_space"
    COLINEAR_HYPERPLANE = "colinear_hyperplane"
    DEGENERATE_ZERO = "degenerate_zero"


@dataclass(frozen=True)
class ConeProjection:
    """Projected exploration gradient and the KKT multipliers of its active set."""
    g_star: np.ndarray
    case_id: ProjectionCase
    mu_r: float = 0.0
    mu_c: float = 0.0


@dataclass(frozen=True)
class ConflictReport:
    """Signs of the return / cost correlations of the raw exploration gradient."""
    v_r: float
    v_c: float
    conflicting: bool


def _validated(g_r, g_c, g_raw, sigma) -> Tuple[np.ndarray, ...]:
    g_r = as_gradient(g_r)
    dim = g_r.shape[0]
    g_c = as_gradient(g_c, dim)
    sigma = as_covariance(sigma, dim)
    if g_raw is None:
        return g_r, g_c, None, sigma
    return g_r, g_c, as_gradient(g_raw, dim), sigma


def gram_scalars(g_r, g_c, g_raw, sigma) -> GramScalars:
    """Gram scalars with the convention g_1 = g_r, g_2 = -g_c."""
    g_r, g_c, g_raw, sigma = _validated(g_r, g_c, g_raw, sigma)
    neg_c = -g_c
    s_rr = sigma_inner(g_r, g_r, sigma)
    s_cc = sigma_inner(neg_c, neg_c, sigma)
    s_rc = sigma_inner(g_r, neg_c, sigma)
    return GramScalars(
        s_rr=s_rr,
        s_rc=s_rc,
        s_cc=s_cc,
        v_r=sigma_inner(g_r, g_raw, sigma),
        v_c=sigma_inner(neg_c, g_raw, sigma),
        det=s_rr * s_cc - s_rc * s_rc,
    )


def detect_conflict(g_r, g_c, g_raw, sigma) -> ConflictReport:
    """Flag g_raw as conflicting when it decreases return or increases cost."""
    gram = gram_scalars(g_r, g_c, g_raw, sigma)
    return ConflictReport(
        v_r=gram.v_r,
        v_c=gram.v_c,
        conflicting=bool(gram.v_r < 0.0 or gram.v_c < 0.0),
    )


def project_mgda(g_r, g_c, lam: float, sigma) -> ConeProjection:
    """Sigma-metric projection of g_r - lam * g_c onto the exploration cone."""
    if not lam >= 0.0 or not np.isfinite(lam):
        raise InvalidInputError(f"拉格朗日乘子必须为非负有限数, 实际 {lam}")
    g_r, g_c, _, sigma = _validated(g_r, g_c, None, sigma)
    g_raw = g_r - lam * g_c
    gram = gram_scalars(g_r, g_c, g_raw, sigma)

    if sigma_inner(g_raw, g_raw, sigma) <= ZERO_NORM ** 2:
        return ConeProjection(np.zeros_like(g_raw), ProjectionCase.DEGENERATE_ZERO)

    has_r = gram.s_rr >= ZERO_NORM ** 2
    has_c = gram.s_cc >= ZERO_NORM ** 2
    if has_r and has_c:
        if gram.is_colinear:
            return _project_colinear(g_raw, g_r, gram)
        return _project_pair(g_raw, g_r, -g_c, gram, sigma)
    if has_r:
        return _project_single(g_raw, g_r, gram.v_r, gram.s_rr, slot=0)
    if has_c:
        return _project_single(g_raw, -g_c, gram.v_c, gram.s_cc, slot=1)
    return ConeProjection(g_raw.copy(), ProjectionCase.IN_CONE)


def _project_single(g_raw: np.ndarray, normal: np.ndarray, v: float, s: float,
                    slot: int) -> ConeProjection:
    if v >= 0.0:
        return ConeProjection(g_raw.copy(), ProjectionCase.IN_CONE)
    mu = -v / s
    g_star = g_raw + mu * normal
    if slot == 0:
        return ConeProjection(g_star, ProjectionCase.ONLY_RETURN_ACTIVE, mu_r=mu)
    return ConeProjection(g_star, ProjectionCase.ONLY_COST_ACTIVE, mu_c=mu)


def _project_colinear(g_raw: np.ndarray, g_r: np.ndarray, gram: GramScalars) -> ConeProjection:
    if gram.s_rc > 0.0:
        # Same orientation: K is the half-space <g_r, u> >= 0.
        shift = min(0.0, gram.v_r / gram.s_rr)
        return ConeProjection(g_raw - shift * g_r, ProjectionCase.COLINEAR_HALF_SPACE,
                              mu_r=-shift)
    # Opposite orientation: K collapses to the hyperplane <g_r, u> = 0.
    shift = gram.v_r / gram.s_rr
    g_star = g_raw - shift * g_r
    if shift <= 0.0:
        return ConeProjection(g_star, ProjectionCase.COLINEAR_HYPERPLANE, mu_r=-shift)
    return ConeProjection(g_star, ProjectionCase.COLINEAR_HYPERPLANE,
                          mu_c=-gram.v_r / gram.s_rc)


def _project_pair(g_raw: np.ndarray, g1: np.ndarray, g2: np.ndarray,
                  gram: GramScalars, sigma: np.ndarray) -> ConeProjection:
    v1, v2 = gram.v_r, gram.v_c
    s11, s12, s22 = gram.s_rr, gram.s_rc, gram.s_cc
    if v1 >= 0.0 and v2 >= 0.0:
        return ConeProjection(g_raw.copy(), ProjectionCase.IN_CONE)

    # A single-constraint projection that lands in K is optimal over K.
    if v1 < 0.0:
        mu1 = -v1 / s11
        if v2 + mu1 * s12 >= 0.0:
            return ConeProjection(g_raw + mu1 * g1, ProjectionCase.ONLY_RETURN_ACTIVE, mu_r=mu1)
    if v2 < 0.0:
        mu2 = -v2 / s22
        if v1 + mu2 * s12 >= 0.0:
            return ConeProjection(g_raw + mu2 * g2, ProjectionCase.ONLY_COST_ACTIVE, mu_c=mu2)

    mu1 = (-s22 * v1 + s12 * v2) / gram.det
    mu2 = (s12 * v1 - s11 * v2) / gram.det
    if mu1 < MULTIPLIER_FLOOR or mu2 < MULTIPLIER_FLOOR:
        return _enumerate_active_sets(g_raw, g1, g2, gram, sigma)
    mu1, mu2 = max(mu1, 0.0), max(mu2, 0.0)
    return ConeProjection(g_raw + mu1 * g1 + mu2 * g2, ProjectionCase.BOTH_ACTIVE,
                          mu_r=mu1, mu_c=mu2)


def _enumerate_active_sets(g_raw: np.ndarray, g1: np.ndarray, g2: np.ndarray,
                           gram: GramScalars, sigma: np.ndarray) -> ConeProjection:
    """Try every active set and keep the feasible one with the smallest objective."""
    normals = (g1, g2)
    gram_matrix = np.array([[gram.s_rr, gram.s_rc], [gram.s_rc, gram.s_cc]])
    v = np.array([gram.v_r, gram.v_c])
    tol = 1e-12 * max(gram.scale, 1.0)
    cases = {
        (): ProjectionCase.IN_CONE,
        (0,): ProjectionCase.ONLY_RETURN_ACTIVE,
        (1,): ProjectionCase.ONLY_COST_ACTIVE,
        (0, 1): ProjectionCase.BOTH_ACTIVE,
    }

    best: Optional[ConeProjection] = None
    best_obj = np.inf
    for size in range(3):
        for active in combinations(range(2), size):
            mu = np.zeros(2)
            if active:
                idx = list(active)
                sub = gram_matrix[np.ix_(idx, idx)]
                if abs(np.linalg.det(sub)) <= ZERO_NORM:
                    continue
                mu[idx] = np.linalg.solve(sub, -v[idx])
            mu = np.maximum(mu, 0.0)
            u = g_raw + mu[0] * g1 + mu[1] * g2
            if any(sigma_inner(n, u, sigma) < -tol for n in normals):
                continue
            diff = u - g_raw
            obj = sigma_inner(diff, diff, sigma)
            if obj < best_obj:
                best_obj = obj
                best = ConeProjection(u, cases[active], mu_r=float(mu[0]), mu_c=float(mu[1]))
    if best is None:
        return ConeProjection(np.zeros_like(g_raw), ProjectionCase.DEGENERATE_ZERO)
    return best
