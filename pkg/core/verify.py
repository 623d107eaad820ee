"""Randomized oracle batteries for the closed-form pieces of the algorithm."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .approximator import (
    AdamState, DenseNet, Optimizer, QuantileEnsemble, apply_gradient_step,
    critic_action_gradients,
)
from .errors import InvalidInputError
from .learner import alm_penalty
from .quantile_critics import (
    Objective, TruncationSpec, bellman_target, cost_bounds, cost_lb_atom_grad,
    quantile_huber_loss, reward_upper_bound, tau_levels, truncate_mix,
)
from .sigma_geometry import project_mgda, sigma_inner
from .step_control import solve_step

logger = logging.getLogger(__name__)

MAX_DUMPS = 10


class Suite(Enum):
    LEMMA1 = "lemma1"
    LEMMA2 = "lemma2"
    BOUNDS = "bounds"
    GRADIENTS = "gradients"
    QUANTILES = "quantiles"

    @classmethod
    def parse(cls, name: str) -> "Suite":
        try:
            return cls(name.lower())
        except ValueError:
            raise InvalidInputError(
                f"未知验证套件 {name!r}, 可选: {', '.join(s.value for s in cls)}") from None


DEFAULT_TOLERANCE = {
    Suite.LEMMA1: 1e-6,
    Suite.LEMMA2: 1.0,  # in grid cells
    Suite.BOUNDS: 1e-9,
    Suite.GRADIENTS: 1e-4,
    Suite.QUANTILES: 0.05,
}


@dataclass
class VerifyReport:
    suite: Suite
    passed: bool
    max_deviation: float
    tolerance: float
    n_cases: int
    failures: List[Dict] = field(default_factory=list)
    n_failed: int = 0

    def summary(self) -> str:
        verdict = "通过" if self.passed else "失败"
        return (f"{self.suite.value}: {verdict} ({self.n_cases} 例, 失败 {self.n_failed}, "
                f"最大偏差 {self.max_deviation:.3e}, 容差 {self.tolerance:.1e})")


class _Collector:
    def __init__(self, suite: Suite, n_cases: int, tol: float):
        self.report = VerifyReport(suite, True, 0.0, tol, n_cases)

    def record(self, case: int, deviation: float, ok: bool, **details) -> None:
        report = self.report
        report.max_deviation = max(report.max_deviation, float(deviation))
        if not ok:
            report.passed = False
            report.n_failed += 1
            if len(report.failures) < MAX_DUMPS:
                report.failures.append({"case": case, "deviation": float(deviation),
                                        **{k: _dump(v) for k, v in details.items()}})


def _dump(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


# -- cone projection -------------------------------------------------------

def cone_projection_oracle(g_raw: np.ndarray, normals: List[np.ndarray],
                           sigma: np.ndarray) -> np.ndarray:
    """Sigma-projection onto {u : <n, u>_S >= 0} via the whitened polar cone.

    In whitened coordinates w = S^(1/2) u the projection is w - P(w), where P
    is the non-negative least-squares projection onto the cone spanned by the
    negated normals; the support of P is found by enumeration.
    """
    root = np.sqrt(sigma)
    w = root * g_raw
    columns = [-(root * n) for n in normals if np.linalg.norm(n) > 1e-12]
    best_p, best_residual = np.zeros_like(w), float(np.dot(w, w))
    for size in range(1, len(columns) + 1):
        for support in combinations(range(len(columns)), size):
            a = np.stack([columns[i] for i in support], axis=1)
            coef, *_ = np.linalg.lstsq(a, w, rcond=None)
            if np.any(coef < -1e-12):
                continue
            p = a @ coef
            residual = float(np.dot(w - p, w - p))
            if residual < best_residual:
                best_p, best_residual = p, residual
    return (w - best_p) / root


def _cone_instance(rng: np.random.Generator, case: int):
    dim = (2, 3, 5)[case % 3]
    sigma = rng.uniform(0.05, 3.0, dim)
    g_r = rng.normal(size=dim)
    mode = case % 4
    if mode == 0:
        g_c = rng.normal(size=dim)
    elif mode == 1:
        g_c = -rng.uniform(0.2, 2.0) * g_r + 0.3 * rng.normal(size=dim)
    elif mode == 2:
        g_c = rng.uniform(0.2, 2.0) * g_r + 0.3 * rng.normal(size=dim)
    else:
        g_c = 1e-3 * rng.normal(size=dim)
    return g_r, g_c, float(rng.uniform(0.0, 5.0)), sigma


def _verify_cone_projection(n_cases: int, rng: np.random.Generator, tol: float) -> VerifyReport:
    out = _Collector(Suite.LEMMA1, n_cases, tol)
    for case in range(n_cases):
        g_r, g_c, lam, sigma = _cone_instance(rng, case)
        proj = project_mgda(g_r, g_c, lam, sigma)
        g_raw = g_r - lam * g_c
        oracle = cone_projection_oracle(g_raw, [g_r, -g_c], sigma)
        diff = proj.g_star - oracle
        scale = max(1.0, np.sqrt(sigma_inner(g_raw, g_raw, sigma)))
        deviation = np.sqrt(sigma_inner(diff, diff, sigma)) / scale

        kkt = 0.0
        for normal, mu in ((g_r, proj.mu_r), (-g_c, proj.mu_c)):
            slack = sigma_inner(normal, proj.g_star, sigma)
            kkt = max(kkt, -slack / scale, -mu, abs(mu * slack) / scale ** 2)
        worst = max(deviation, kkt)
        out.record(case, worst, worst <= tol, g_r=g_r, g_c=g_c, lam=lam, sigma=sigma,
                   case_id=proj.case_id.value)
    return out.report


# -- step length -----------------------------------------------------------

GRID_POINTS = 100_000


def _verify_step_solve(n_cases: int, rng: np.random.Generator, tol: float) -> VerifyReport:
    """Largest grid minimizer of the hinge versus the closed form; tol is in grid cells."""
    out = _Collector(Suite.LEMMA2, n_cases, tol)
    for case in range(n_cases):
        s = float(rng.normal())
        while s == 0.0:
            s = float(rng.normal())
        r = float(rng.normal())
        eta_max = float(rng.uniform(0.0, 5.0))
        grid = np.linspace(0.0, eta_max, GRID_POINTS)
        hinge = np.maximum(0.0, grid * s - r)
        floor = hinge.min() + 1e-12 * max(1.0, abs(r), abs(s) * eta_max)
        grid_eta = grid[np.nonzero(hinge <= floor)[0][-1]]
        cell = eta_max / (GRID_POINTS - 1) if eta_max > 0.0 else 1.0
        deviation = abs(solve_step(s, r, eta_max).eta_star - grid_eta) / cell
        out.record(case, deviation, deviation <= tol, s=s, r=r, eta_max=eta_max)
    return out.report


# -- bound algebra ---------------------------------------------------------

def _scalar_bounds(atoms: np.ndarray, beta_r: float, beta_c: float, alpha: int):
    n, m = atoms.shape
    means, stds = [], []
    for j in range(m):
        col = [atoms[i, j] for i in range(n)]
        mu = sum(col) / n
        means.append(mu)
        stds.append((sum((x - mu) ** 2 for x in col) / n) ** 0.5)
    head = range(m - alpha, m)
    lb = sum(means[j] - beta_c * stds[j] for j in head) / alpha
    ub = sum(means[j] + beta_c * stds[j] for j in head) / alpha
    r_ub = sum(means[j] + beta_r * stds[j] for j in range(m)) / m
    mean = sum(sum(row) for row in atoms.tolist()) / (n * m)
    return lb, ub, mean, r_ub


def _verify_bounds(n_cases: int, rng: np.random.Generator, tol: float) -> VerifyReport:
    out = _Collector(Suite.BOUNDS, n_cases, tol)
    for case in range(n_cases):
        n, m = int(rng.integers(1, 7)), int(rng.integers(1, 33))
        alpha = int(rng.integers(1, m + 1))
        beta_r, beta_c = rng.uniform(0.0, 5.0, 2)
        atoms = rng.normal(size=(n, m)) * rng.uniform(0.1, 10.0)
        lb, ub, mean = cost_bounds(atoms, beta_c, alpha)
        r_ub, r_mean = reward_upper_bound(atoms, beta_r)
        ref = _scalar_bounds(atoms, beta_r, beta_c, alpha)
        scale = max(1.0, float(np.abs(atoms).max()))
        deviation = max(abs(lb - ref[0]), abs(ub - ref[1]), abs(mean - ref[2]),
                        abs(r_ub - ref[3]), abs(r_mean - ref[2])) / scale

        pool = n * m
        spec = TruncationSpec(int(rng.integers(0, pool)), int(rng.integers(0, pool)))
        kept_r = truncate_mix(atoms, spec, Objective.REWARD)
        kept_c = truncate_mix(atoms, spec, Objective.COST)
        ordered = (kept_r.size == pool - spec.k_r and kept_c.size == pool - spec.k_c
                   and np.all(np.diff(kept_r) >= 0.0) and np.all(np.diff(kept_c) >= 0.0)
                   and kept_r.mean() <= atoms.mean() + 1e-12 * scale
                   and kept_c.mean() >= atoms.mean() - 1e-12 * scale)
        out.record(case, deviation, deviation <= tol and ordered, atoms=atoms, alpha=alpha,
                   truncation=[spec.k_r, spec.k_c], ordered=bool(ordered))
    return out.report


# -- gradients -------------------------------------------------------------

FD_EPS = 1e-6
KINK_MARGIN = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error with an absolute floor for vanishing gradients."""
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / denom)


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray,
                       eps: float = FD_EPS) -> np.ndarray:
    # C order so the flat views below write through to x
    x = np.array(x, dtype=np.float64, order="C")
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn(x)
        flat[i] = orig - eps
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def _param_gradient_case(rng: np.random.Generator) -> Optional[float]:
    sizes = (int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(2, 9)),
             int(rng.integers(1, 4)))
    net = DenseNet(sizes, int(rng.integers(2 ** 31)), output_scale=0.5)
    x = rng.normal(size=(3, sizes[0]))
    weights = rng.normal(size=(3, sizes[-1]))
    out, cache = net.forward(x)
    if cache.kink_margin() < KINK_MARGIN:
        return None
    grads, grad_x = net.backward(cache, weights)
    params = net.params
    layer = int(rng.integers(len(params)))

    def loss_of(p: np.ndarray) -> float:
        trial = [q if i != layer else p for i, q in enumerate(params)]
        clone = net.copy()
        clone.set_params(trial)
        return float(np.sum(clone.forward(x)[0] * weights))

    numeric = central_difference(loss_of, params[layer])
    numeric_x = central_difference(lambda z: float(np.sum(net.forward(z)[0] * weights)), x)
    return max(relative_error(grads[layer], numeric), relative_error(grad_x, numeric_x))


def _action_gradient_case(rng: np.random.Generator) -> Optional[float]:
    obs_dim, act_dim = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    n, m = int(rng.integers(2, 5)), int(rng.integers(2, 9))
    alpha = int(rng.integers(1, m + 1))
    beta_r, beta_c = rng.uniform(0.5, 4.0, 2)
    seed = int(rng.integers(2 ** 31))
    reward = QuantileEnsemble(obs_dim, act_dim, n, m, (8,), seed, output_scale=0.5)
    cost = QuantileEnsemble(obs_dim, act_dim, n, m, (8,), seed + 1, output_scale=0.5)
    state, action = rng.normal(size=obs_dim), rng.normal(size=act_dim)
    _, caches = reward.forward(state[None], action[None])
    _, cost_caches = cost.forward(state[None], action[None])
    if min(reward.kink_margin(caches), cost.kink_margin(cost_caches)) < KINK_MARGIN:
        return None
    grads, _ = critic_action_gradients(reward, cost, state, beta_r, beta_c, alpha, action)

    def bound(which: int) -> Callable[[np.ndarray], float]:
        def fn(a: np.ndarray) -> float:
            r_atoms = reward.forward(state[None], a[None])[0][0]
            c_atoms = cost.forward(state[None], a[None])[0][0]
            if which == 0:
                return reward_upper_bound(r_atoms, beta_r)[0]
            lb, _, mean = cost_bounds(c_atoms, beta_c, alpha)
            return lb if which == 1 else mean
        return fn

    return max(relative_error(g, central_difference(bound(i), action))
               for i, g in enumerate((grads.g_r, grads.g_c, grads.g_m)))


def _loss_gradient_case(rng: np.random.Generator) -> Optional[float]:
    n, m, k = int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
    kappa = float(rng.uniform(0.1, 2.0))
    pred = rng.normal(size=(2, n, m))
    targets = rng.normal(size=(2, k))
    u = targets[:, None, None, :] - pred[..., None]
    if np.min(np.abs(np.abs(u) - kappa)) < KINK_MARGIN or np.min(np.abs(u)) < KINK_MARGIN:
        return None
    _, grad = quantile_huber_loss(pred, targets, kappa)
    numeric = central_difference(lambda p: quantile_huber_loss(p, targets, kappa)[0], pred)

    lam, c, d = rng.uniform(0.0, 5.0), rng.uniform(0.5, 20.0), rng.normal()
    q = rng.normal(size=5) + d
    if np.min(np.abs(lam + c * (q - d))) < KINK_MARGIN:
        return None
    _, penalty_grad = alm_penalty(q, lam, c, d)
    penalty_numeric = central_difference(lambda z: float(np.sum(alm_penalty(z, lam, c, d)[0])), q)

    atoms = rng.normal(size=(n + 1, m))
    alpha = int(rng.integers(1, m + 1))
    beta = rng.uniform(0.5, 4.0)
    atom_numeric = central_difference(lambda a: cost_bounds(a, beta, alpha)[0], atoms)
    return max(relative_error(grad, numeric), relative_error(penalty_grad, penalty_numeric),
               relative_error(cost_lb_atom_grad(atoms, beta, alpha), atom_numeric))


def _verify_gradients(n_cases: int, rng: np.random.Generator, tol: float) -> VerifyReport:
    out = _Collector(Suite.GRADIENTS, n_cases, tol)
    kinds = (("parameters", _param_gradient_case), ("action_input", _action_gradient_case),
             ("loss_and_penalty", _loss_gradient_case))
    for case in range(n_cases):
        name, fn = kinds[case % len(kinds)]
        error = None
        # redraw instances that sit on a ReLU / Huber / switch kink
        while error is None:
            error = fn(rng)
        out.record(case, error, error <= tol, kind=name)
    return out.report


# -- quantile convergence --------------------------------------------------

def fit_tabular_atoms(sampler: Callable[[np.random.Generator, np.ndarray], np.ndarray],
                      n_quantiles: int, rng: np.random.Generator, kappa: float,
                      steps: int = 3000, lr: Tuple[float, float] = (0.05, 0.001)) -> np.ndarray:
    """Adam on a free M-vector of atoms; `sampler(rng, atoms)` returns a batch of targets."""
    atoms = np.zeros((1, n_quantiles))
    state = AdamState.zeros_like([atoms])
    for i in range(steps):
        step_lr = lr[0] + (lr[1] - lr[0]) * i / max(steps - 1, 1)
        targets = sampler(rng, atoms)
        _, grad = quantile_huber_loss(atoms, targets, kappa)
        (atoms,), state = apply_gradient_step([atoms], [grad], state, step_lr)
    return atoms[0]


def fit_network_atoms(sampler: Callable[[np.random.Generator, np.ndarray], np.ndarray],
                      n_quantiles: int, rng: np.random.Generator, kappa: float,
                      n_critics: int = 2, hidden: Tuple[int, ...] = (16,), seed: int = 0,
                      steps: int = 3000, lr: Tuple[float, float] = (0.01, 0.0005)) -> np.ndarray:
    """Train a QuantileEnsemble at one fixed (state, action) input; returns its N x M atoms.

    The update path is the learner's: forward, quantile Huber gradient, backward, Adam.
    """
    ensemble = QuantileEnsemble(1, 1, n_critics, n_quantiles, hidden, seed)
    state, action = np.array([[0.5]]), np.array([[-0.3]])
    optimizer = Optimizer.for_params(ensemble.params, lr[0])
    for i in range(steps):
        optimizer.lr = lr[0] + (lr[1] - lr[0]) * i / max(steps - 1, 1)
        atoms, caches = ensemble.forward(state, action)
        targets = np.asarray(sampler(rng, atoms[0]), dtype=np.float64).reshape(1, -1)
        _, grad = quantile_huber_loss(atoms, targets, kappa)
        grads, _ = ensemble.backward(caches, grad)
        ensemble.set_params(optimizer.step(ensemble.params, grads))
    return ensemble.forward(state, action)[0][0]


def _verify_quantiles(n_cases: int, rng: np.random.Generator, tol: float) -> VerifyReport:
    """Bernoulli(0.5) at gamma = 0 within `tol`, for free atoms and for a network critic;
    the gamma = 0.5 chain within 0.4 * tol relative.
    """
    out = _Collector(Suite.QUANTILES, n_cases, tol)
    no_trunc = TruncationSpec(0, 0)
    for case in range(n_cases):
        bern = fit_tabular_atoms(
            lambda g, a: bellman_target(g.integers(0, 2, size=256).astype(float),
                                        np.ones(256), 0.0, np.zeros((256, 4))).reshape(-1),
            4, rng, kappa=0.01)
        bern_err = float(np.max(np.abs(bern - np.array([0.0, 0.0, 1.0, 1.0]))))

        net = fit_network_atoms(lambda g, a: g.integers(0, 2, size=256).astype(float), 4, rng,
                                kappa=0.01, seed=int(rng.integers(2 ** 31)))
        net_err = float(np.max(np.abs(net - np.array([0.0, 0.0, 1.0, 1.0]))))

        def chain_targets(g, a):
            pooled = truncate_mix(a, no_trunc, Objective.REWARD)
            return bellman_target(1.0, 0.0, 0.5, pooled)
        chain = fit_tabular_atoms(chain_targets, 8, rng, kappa=1.0, steps=4000)
        chain_err = float(np.max(np.abs(chain - 2.0)) / 2.0)
        deviation = max(bern_err, net_err, chain_err / 0.4)
        out.record(case, deviation, deviation <= tol, bernoulli=bern, network=net, chain=chain)
    return out.report


RUNNERS = {
    Suite.LEMMA1: _verify_cone_projection,
    Suite.LEMMA2: _verify_step_solve,
    Suite.BOUNDS: _verify_bounds,
    Suite.GRADIENTS: _verify_gradients,
    Suite.QUANTILES: _verify_quantiles,
}


def run_verify(suite, n_cases: int, seed: int = 0, tol: Optional[float] = None) -> VerifyReport:
    """Run one oracle battery; passed is True iff every case is within tolerance."""
    suite = suite if isinstance(suite, Suite) else Suite.parse(suite)
    if n_cases < 1:
        raise InvalidInputError("用例数必须 >= 1")
    tol = DEFAULT_TOLERANCE[suite] if tol is None else float(tol)
    if not tol > 0.0:
        raise InvalidInputError("容差必须为正")
    report = RUNNERS[suite](n_cases, np.random.default_rng(seed), tol)
    log = logger.info if report.passed else logger.error
    log(report.summary())
    return report
