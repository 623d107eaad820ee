"""Quantile critic ensembles: statistics, CVaR bounds, truncation and loss.

Atom arrays have shape (..., N, M): any leading batch axes, then N critics,
then M quantile heads at levels tau_m = (m - 0.5) / M.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np

from .errors import InvalidInputError, NumericDivergenceError


def tau_levels(n_quantiles: int) -> np.ndarray:
    """Quantile midpoints (m - 0.5) / M for m = 1..M."""
    if n_quantiles < 1:
        raise InvalidInputError("分位数个数必须 >= 1")
    return (np.arange(n_quantiles, dtype=np.float64) + 0.5) / n_quantiles


@dataclass(frozen=True)
class QuantileAtoms:
    """N x M atom matrix of one (state, action) pair."""
    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise InvalidInputError(f"原子矩阵必须是 N x M, 实际形状 {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise NumericDivergenceError("分位数原子包含非有限值, 训练已发散")
        object.__setattr__(self, "atoms", atoms)

    @property
    def n_critics(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_quantiles(self) -> int:
        return self.atoms.shape[1]

    @property
    def tau_levels(self) -> np.ndarray:
        return tau_levels(self.n_quantiles)


class Objective(Enum):
    """Which signal a critic ensemble estimates."""
    REWARD = "reward"
    COST = "cost"


@dataclass(frozen=True)
class TruncationSpec:
    """Number of pooled atoms dropped: top k_r for reward, bottom k_c for cost."""
    k_r: int = 0
    k_c: int = 0

    def validate(self, pool_size: int) -> None:
        if self.k_r < 0 or self.k_c < 0:
            raise InvalidInputError("截断数必须非负")
        if self.k_r >= pool_size or self.k_c >= pool_size:
            raise InvalidInputError(
                f"截断数 ({self.k_r}, {self.k_c}) 必须小于原子池大小 {pool_size}"
            )

    def dropped(self, objective: Objective) -> int:
        return self.k_r if objective is Objective.REWARD else self.k_c


@dataclass(frozen=True)
class CriticBounds:
    """Aggregated optimistic / conservative critic estimates at one point."""
    q_c_lb: float
    q_c_ub: float
    q_c_mean: float
    q_r_ub: float
    q_r_mean: float
    beta_r: float
    beta_c: float
    alpha: int


def _raw(atoms) -> np.ndarray:
    if isinstance(atoms, QuantileAtoms):
        return atoms.atoms
    return np.asarray(atoms, dtype=np.float64)


def quantile_stats(atoms) -> Tuple[np.ndarray, np.ndarray]:
    """Per-quantile mean and population std across the critic axis."""
    arr = _raw(atoms)
    return arr.mean(axis=-2), arr.std(axis=-2)


def _check_alpha(alpha: int, n_quantiles: int) -> None:
    if not 1 <= alpha <= n_quantiles:
        raise InvalidInputError(f"CVaR alpha={alpha} 超出范围 [1, {n_quantiles}]")


def cost_bounds(atoms, beta_c: float, alpha: int):
    """CVaR lower / upper cost bounds over the alpha head atoms, and the atom mean.

    Returns (q_c_lb, q_c_ub, q_c_mean), each a float for a single N x M matrix
    or an array over the leading batch axes.
    """
    arr = _raw(atoms)
    _check_alpha(alpha, arr.shape[-1])
    mean, std = quantile_stats(arr)
    head = slice(arr.shape[-1] - alpha, None)
    lb = (mean[..., head] - beta_c * std[..., head]).mean(axis=-1)
    ub = (mean[..., head] + beta_c * std[..., head]).mean(axis=-1)
    q_mean = arr.mean(axis=(-2, -1))
    return _scalarize(lb), _scalarize(ub), _scalarize(q_mean)


def reward_upper_bound(atoms, beta_r: float):
    """Optimistic reward bound over the full distribution, and the atom mean."""
    arr = _raw(atoms)
    mean, std = quantile_stats(arr)
    ub = (mean + beta_r * std).mean(axis=-1)
    return _scalarize(ub), _scalarize(arr.mean(axis=(-2, -1)))


def critic_bounds(reward_atoms, cost_atoms, beta_r: float, beta_c: float,
                  alpha: int) -> CriticBounds:
    """All five aggregated estimates for one (state, action) pair."""
    q_c_lb, q_c_ub, q_c_mean = cost_bounds(cost_atoms, beta_c, alpha)
    q_r_ub, q_r_mean = reward_upper_bound(reward_atoms, beta_r)
    return CriticBounds(
        q_c_lb=float(q_c_lb), q_c_ub=float(q_c_ub), q_c_mean=float(q_c_mean),
        q_r_ub=float(q_r_ub), q_r_mean=float(q_r_mean),
        beta_r=beta_r, beta_c=beta_c, alpha=alpha,
    )


def _scalarize(value: np.ndarray):
    return float(value) if np.ndim(value) == 0 else value


def _band_atom_grad(arr: np.ndarray, beta: float, sign: float, head: slice) -> np.ndarray:
    """d/dq of mean over `head` of (mu_m + sign * beta * sigma_m)."""
    n, m = arr.shape[-2], arr.shape[-1]
    width = len(range(m)[head])
    mean, std = quantile_stats(arr)
    centred = arr - mean[..., None, :]
    safe_std = np.where(std > 0.0, std, 1.0)
    dstd = np.where(std[..., None, :] > 0.0, centred / (n * safe_std[..., None, :]), 0.0)
    grad = np.zeros_like(arr)
    grad[..., head] = (1.0 / n + sign * beta * dstd[..., head]) / width
    return grad


def reward_ub_atom_grad(atoms, beta_r: float) -> np.ndarray:
    """Gradient of the optimistic reward bound with respect to every atom."""
    arr = _raw(atoms)
    return _band_atom_grad(arr, beta_r, 1.0, slice(None))


def cost_lb_atom_grad(atoms, beta_c: float, alpha: int) -> np.ndarray:
    arr = _raw(atoms)
    _check_alpha(alpha, arr.shape[-1])
    return _band_atom_grad(arr, beta_c, -1.0, slice(arr.shape[-1] - alpha, None))


def cost_ub_atom_grad(atoms, beta_c: float, alpha: int) -> np.ndarray:
    arr = _raw(atoms)
    _check_alpha(alpha, arr.shape[-1])
    return _band_atom_grad(arr, beta_c, 1.0, slice(arr.shape[-1] - alpha, None))


def mean_atom_grad(atoms) -> np.ndarray:
    arr = _raw(atoms)
    return np.full_like(arr, 1.0 / (arr.shape[-2] * arr.shape[-1]))


def truncate_mix(next_atoms, spec: TruncationSpec, objective: Objective) -> np.ndarray:
    """Pool all critics' atoms, sort ascending and drop the biased extreme.

    Reward pools lose their k_r largest atoms, cost pools their k_c smallest.
    Leading batch axes are preserved; the last axis has N * M - k entries.
    """
    arr = _raw(next_atoms)
    pool_size = arr.shape[-2] * arr.shape[-1]
    spec.validate(pool_size)
    pooled = np.sort(arr.reshape(arr.shape[:-2] + (pool_size,)), axis=-1)
    k = spec.dropped(objective)
    if objective is Objective.REWARD:
        return pooled[..., :pool_size - k]
    return pooled[..., k:]


def bellman_target(signal, done, gamma: float, truncated_next) -> np.ndarray:
    """One-step distributional targets; constants for the optimizer."""
    if not 0.0 <= gamma < 1.0:
        raise InvalidInputError(f"折扣因子必须在 [0, 1) 内, 实际 {gamma}")
    z = np.asarray(truncated_next, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)[..., None]
    not_done = 1.0 - np.asarray(done, dtype=np.float64)[..., None]
    return signal + not_done * gamma * z


def quantile_huber_loss(pred_atoms, targets, kappa: float = 1.0) -> Tuple[float, np.ndarray]:
    """Asymmetric quantile Huber loss averaged over (atom, target) pairs.

    pred_atoms has shape (..., N, M); targets has shape (..., K) with the same
    leading axes. Returns the loss and its gradient with respect to pred_atoms.
    """
    if kappa <= 0.0:
        raise InvalidInputError("kappa 必须为正")
    pred = _raw(pred_atoms)
    targets = np.asarray(targets, dtype=np.float64)
    tau = tau_levels(pred.shape[-1])

    # u[..., n, m, k] = target_k - pred_nm
    u = targets[..., None, None, :] - pred[..., :, :, None]
    abs_u = np.abs(u)
    huber = np.where(abs_u <= kappa, 0.5 * u * u, kappa * (abs_u - 0.5 * kappa))
    weight = np.abs(tau[:, None] - (u < 0.0))
    count = u.size
    loss = float(np.sum(weight * huber) / (kappa * count))

    dhuber_du = np.where(abs_u <= kappa, u, kappa * np.sign(u))
    grad = -np.sum(weight * dhuber_du, axis=-1) / (kappa * count)
    return loss, grad
