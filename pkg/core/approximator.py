"""Dense function approximators with analytic backward passes.

Provides the diagonal-Gaussian policy, the quantile critic ensembles, the
action-input gradients of aggregated critic bounds, and an Adam optimizer.
Batched inputs have shape (B, dim); single inputs are 1-D.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, NumericDivergenceError
from .quantile_critics import (
    CriticBounds, QuantileAtoms, critic_bounds, cost_lb_atom_grad,
    mean_atom_grad, reward_ub_atom_grad,
)

logger = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
OUTPUT_INIT_SCALE = 3e-3


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


@dataclass
class ForwardCache:
    """Layer inputs and hidden pre-activations recorded by DenseNet.forward."""
    inputs: List[np.ndarray]
    preacts: List[np.ndarray]

    def kink_margin(self) -> float:
        """Smallest |pre-activation| over all ReLU units."""
        if not self.preacts:
            return np.inf
        return float(min(np.min(np.abs(z)) for z in self.preacts))


class DenseNet:
    """ReLU hidden layers, linear output head.

    Hidden weights are orthogonal, the output head is small-uniform and all
    biases start at zero.
    """

    def __init__(self, sizes: Sequence[int], seed: int,
                 output_scale: float = OUTPUT_INIT_SCALE):
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise InvalidInputError(f"非法网络结构 {tuple(sizes)}")
        self.sizes = tuple(int(s) for s in sizes)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if i == n_layers - 1:
                w = rng.uniform(-output_scale, output_scale, size=(fan_in, fan_out))
            else:
                w = _orthogonal(rng, fan_in, fan_out, gain=np.sqrt(2.0))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        params = list(params)
        if len(params) != 2 * len(self.weights):
            raise InvalidInputError("参数个数与网络层数不匹配")
        for i in range(len(self.weights)):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise InvalidInputError(f"第 {i} 层参数形状不匹配")
            self.weights[i] = np.array(w, dtype=np.float64)
            self.biases[i] = np.array(b, dtype=np.float64)

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params))

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.sizes[0]:
            raise InvalidInputError(f"输入形状 {h.shape} 与网络输入维度 {self.sizes[0]} 不符")
        cache = ForwardCache(inputs=[], preacts=[])
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.inputs.append(h)
            z = h @ w + b
            if i < last:
                cache.preacts.append(z)
                h = np.maximum(z, 0.0)
            else:
                h = z
        return h, cache

    def backward(self, cache: ForwardCache,
                 grad_out: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """Parameter gradients (same order as `params`) and input gradient."""
        grads: List[np.ndarray] = [None] * (2 * len(self.weights))
        g = np.asarray(grad_out, dtype=np.float64)
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * (cache.preacts[i] > 0.0)
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    def copy(self) -> "DenseNet":
        clone = DenseNet.__new__(DenseNet)
        clone.sizes = self.sizes
        clone.seed = self.seed
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone


@dataclass(frozen=True)
class ActionBox:
    """Axis-aligned action bounds."""
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64).reshape(-1)
        high = np.asarray(self.high, dtype=np.float64).reshape(-1)
        if low.shape != high.shape or np.any(low > high):
            raise InvalidInputError("动作边界非法")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return self.low.shape[0]

    def clip(self, action: np.ndarray) -> np.ndarray:
        return np.clip(action, self.low, self.high)

    def sample_uniform(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high)


@dataclass(frozen=True)
class GaussianPolicyOutput:
    """Target policy N(mu, diag(exp(2 log_std)))."""
    mu: np.ndarray
    log_std: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def covariance(self) -> np.ndarray:
        return np.exp(2.0 * self.log_std)


@dataclass(frozen=True)
class GradientTriple:
    """Action-space gradients of Q_r^UB, Q_c^LB and Q_c^mean at a = mu_T."""
    g_r: np.ndarray
    g_c: np.ndarray
    g_m: np.ndarray

    def is_finite(self) -> bool:
        return bool(all(np.all(np.isfinite(g)) for g in (self.g_r, self.g_c, self.g_m)))


@dataclass
class PolicyCache:
    net_cache: ForwardCache
    raw_log_std: np.ndarray


class GaussianPolicy:
    """Diagonal Gaussian policy in raw action space (clipped, not squashed)."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int], seed: int,
                 log_std_min: float = LOG_STD_MIN, log_std_max: float = LOG_STD_MAX,
                 output_scale: float = OUTPUT_INIT_SCALE):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max
        self.net = DenseNet((obs_dim, *hidden, 2 * act_dim), seed, output_scale)

    @property
    def params(self) -> List[np.ndarray]:
        return self.net.params

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        self.net.set_params(params)

    def forward(self, states: np.ndarray) -> Tuple[GaussianPolicyOutput, PolicyCache]:
        states = np.asarray(states, dtype=np.float64)
        single = states.ndim == 1
        out, cache = self.net.forward(states[None] if single else states)
        if not np.all(np.isfinite(out)):
            raise NumericDivergenceError("策略网络输出非有限值")
        mu = out[:, :self.act_dim]
        raw = out[:, self.act_dim:]
        log_std = np.clip(raw, self.log_std_min, self.log_std_max)
        if single:
            mu, log_std = mu[0], log_std[0]
        return GaussianPolicyOutput(mu=mu, log_std=log_std), PolicyCache(cache, raw)

    def backward(self, cache: PolicyCache, grad_mu: np.ndarray,
                 grad_log_std: np.ndarray) -> List[np.ndarray]:
        """Parameter gradients given batched gradients w.r.t. mu and log_std."""
        inside = (cache.raw_log_std > self.log_std_min) & (cache.raw_log_std < self.log_std_max)
        grad_out = np.concatenate(
            [np.atleast_2d(grad_mu), np.atleast_2d(grad_log_std) * inside], axis=1)
        grads, _ = self.net.backward(cache.net_cache, grad_out)
        return grads


def policy_forward(policy: GaussianPolicy, state: np.ndarray) -> GaussianPolicyOutput:
    """Deterministic target policy at `state`."""
    out, _ = policy.forward(state)
    return out


def gaussian_log_prob(policy_out: GaussianPolicyOutput, raw_action: np.ndarray) -> np.ndarray:
    """Log-density of the (unclipped) diagonal Gaussian."""
    xi = (raw_action - policy_out.mu) / policy_out.std
    return np.sum(-0.5 * xi * xi - policy_out.log_std - 0.5 * np.log(2.0 * np.pi), axis=-1)


def sample_action(policy_out: GaussianPolicyOutput, rng: np.random.Generator,
                  action_box: ActionBox, mean: Optional[np.ndarray] = None
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Reparameterized sample clipped to the box, with the unclipped log-prob.

    `mean` replaces the policy mean (used for the shifted exploration policy,
    which shares the target covariance).
    """
    centre = policy_out.mu if mean is None else mean
    xi = rng.standard_normal(np.shape(centre))
    raw = centre + policy_out.std * xi
    shifted = GaussianPolicyOutput(mu=centre, log_std=policy_out.log_std)
    return action_box.clip(raw), gaussian_log_prob(shifted, raw)


class QuantileEnsemble:
    """N independent quantile critics over (state, action), M heads each."""

    def __init__(self, obs_dim: int, act_dim: int, n_critics: int, n_quantiles: int,
                 hidden: Sequence[int], seed: int, output_scale: float = OUTPUT_INIT_SCALE):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.n_critics = n_critics
        self.n_quantiles = n_quantiles
        seeds = np.random.SeedSequence(seed).generate_state(n_critics)
        self.nets = [DenseNet((obs_dim + act_dim, *hidden, n_quantiles), int(s), output_scale)
                     for s in seeds]

    @property
    def params(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for net in self.nets:
            out.extend(net.params)
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        params = list(params)
        per_net = len(self.nets[0].params)
        for i, net in enumerate(self.nets):
            net.set_params(params[i * per_net:(i + 1) * per_net])

    def copy(self) -> "QuantileEnsemble":
        clone = QuantileEnsemble.__new__(QuantileEnsemble)
        clone.__dict__.update(self.__dict__)
        clone.nets = [net.copy() for net in self.nets]
        return clone

    def forward(self, states: np.ndarray, actions: np.ndarray
                ) -> Tuple[np.ndarray, List[ForwardCache]]:
        """Atoms of shape (B, N, M) for batched states and actions."""
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        outs, caches = [], []
        for net in self.nets:
            out, cache = net.forward(x)
            outs.append(out)
            caches.append(cache)
        atoms = np.stack(outs, axis=1)
        if not np.all(np.isfinite(atoms)):
            raise NumericDivergenceError("评论家网络输出非有限值, 训练已发散")
        return atoms, caches

    def backward(self, caches: List[ForwardCache], grad_atoms: np.ndarray
                 ) -> Tuple[List[np.ndarray], np.ndarray]:
        """Parameter gradients (same order as `params`) and action gradients (B, act_dim)."""
        grads: List[np.ndarray] = []
        grad_action = np.zeros((grad_atoms.shape[0], self.act_dim))
        for i, (net, cache) in enumerate(zip(self.nets, caches)):
            g, g_in = net.backward(cache, grad_atoms[:, i, :])
            grads.extend(g)
            grad_action += g_in[:, self.obs_dim:]
        return grads, grad_action

    def kink_margin(self, caches: List[ForwardCache]) -> float:
        return min(c.kink_margin() for c in caches)


def predict_atoms(ensemble: QuantileEnsemble, state: np.ndarray,
                  action: np.ndarray) -> QuantileAtoms:
    """N x M atoms for one (state, action) pair."""
    atoms, _ = ensemble.forward(np.asarray(state)[None], np.asarray(action)[None])
    return QuantileAtoms(atoms[0])


def bound_action_gradient(ensemble: QuantileEnsemble, states: np.ndarray, actions: np.ndarray,
                          atom_grad: Callable[[np.ndarray], np.ndarray]
                          ) -> Tuple[np.ndarray, np.ndarray]:
    """Atoms and d(bound)/d(action) for a batch, where `atom_grad` maps atoms to d(bound)/d(atoms)."""
    atoms, caches = ensemble.forward(states, actions)
    _, grad_action = ensemble.backward(caches, atom_grad(atoms))
    return atoms, grad_action


def critic_action_gradients(reward_critics: QuantileEnsemble, cost_critics: QuantileEnsemble,
                            state: np.ndarray, beta_r: float, beta_c: float, alpha: int,
                            at_action: np.ndarray) -> Tuple[GradientTriple, CriticBounds]:
    """Gradients of Q_r^UB, Q_c^LB, Q_c^mean with respect to the action input only."""
    state = np.asarray(state, dtype=np.float64)[None]
    action = np.asarray(at_action, dtype=np.float64)[None]
    r_atoms, g_r = bound_action_gradient(
        reward_critics, state, action, lambda a: reward_ub_atom_grad(a, beta_r))
    c_atoms, caches = cost_critics.forward(state, action)
    _, g_c = cost_critics.backward(caches, cost_lb_atom_grad(c_atoms, beta_c, alpha))
    _, g_m = cost_critics.backward(caches, mean_atom_grad(c_atoms))
    bounds = critic_bounds(r_atoms[0], c_atoms[0], beta_r, beta_c, alpha)
    return GradientTriple(g_r=g_r[0], g_c=g_c[0], g_m=g_m[0]), bounds


@dataclass
class AdamState:
    """First / second moments, step count and the number of skipped steps."""
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def apply_gradient_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                        state: AdamState, lr: float,
                        hyper: AdamHyper = AdamHyper()) -> Tuple[List[np.ndarray], AdamState]:
    """One Adam step; non-finite gradients skip the step and bump `skipped`."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise InvalidInputError("梯度形状与参数不匹配")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state = AdamState(m=state.m, v=state.v, t=state.t, skipped=state.skipped + 1)
        logger.warning("梯度非有限, 跳过本次更新 (累计 %d 次)", state.skipped)
        return list(params), state

    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        m_hat = m / (1.0 - hyper.beta1 ** t)
        v_hat = v / (1.0 - hyper.beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + hyper.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(m=new_m, v=new_v, t=t, skipped=state.skipped)


@dataclass
class Optimizer:
    """Adam bound to a learning rate; owns its state between steps."""
    lr: float
    state: AdamState
    hyper: AdamHyper = field(default_factory=AdamHyper)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float) -> "Optimizer":
        return cls(lr=lr, state=AdamState.zeros_like(params))

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        new_params, self.state = apply_gradient_step(params, grads, self.state, self.lr, self.hyper)
        return new_params
