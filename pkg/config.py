"""Configuration management for COX-Q desk runs."""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from core.errors import ConfigError


@dataclass
class EnvConfig:
    """Environment selection and constants."""
    name: str = "toy_velocity"  # toy_velocity | toy_sparse_goal
    horizon: int = 200
    gamma: float = 0.99
    cost_limit: float = 5.0  # per-episode limit d_episode
    dt: float = 0.05
    v_threshold: float = 1.0
    ctrl_weight: float = 0.001
    noise_std: float = 0.01
    init_perturbation: float = 0.01


@dataclass
class NetworkConfig:
    """Hidden layer widths."""
    policy_hidden: List[int] = field(default_factory=lambda: [64, 64])
    critic_hidden: List[int] = field(default_factory=lambda: [64, 64])
    log_std_min: float = -5.0
    log_std_max: float = 2.0


@dataclass
class CriticConfig:
    """Quantile critic ensembles."""
    n_critics: int = 5
    n_quantiles: int = 25
    k_r: int = 2
    k_c: int = 5
    kappa: float = 1.0
    lr: float = 3e-4


@dataclass
class ExplorationConfig:
    """COX exploration."""
    enabled: bool = True
    beta_r: float = 4.0
    beta_c: float = 3.0
    cvar_alpha: int = 13
    delta_max: float = 6.0
    delta_init: float = 6.0
    delta_min: float = 1e-4
    lr_delta: float = 1e-4
    delta_autotune: bool = True
    recent_window: int = 10000
    delta_update_interval: int = 1000


@dataclass
class LearnerConfig:
    """Actor, multiplier and temperature updates."""
    policy_lr: float = 3e-4
    entropy_lr: float = 3e-4
    batch_size: int = 256
    tau: float = 0.005
    use_alm: bool = True
    alm_c: float = 10.0
    lambda_init: float = 1.0
    lambda_lr: float = 3e-4
    entropy_autotune: bool = True
    init_temperature: float = 0.05
    target_entropy: Optional[float] = None  # None -> -action_dim
    use_entropy_bonus: bool = True
    update_every: int = 1
    gradient_steps: int = 1
    policy_update_steps: int = 1
    target_update_frequency: int = 1


@dataclass
class RunConfig:
    """Run length, cadence and output."""
    seed: int = 0
    total_steps: int = 150000
    initial_steps: int = 5000
    buffer_size: int = 1000000
    num_envs: int = 1
    log_interval: int = 1000
    eval_interval: int = 5000
    eval_episodes: int = 20
    bias_states: int = 10
    bias_rollouts: int = 8
    checkpoint_interval: int = 0  # 0 -> only at the end
    out_dir: str = "runs/default"
    log_wall_time: bool = False  # wall time breaks byte-identical metrics


SECTIONS: Tuple[Tuple[str, type], ...] = (
    ("env", EnvConfig),
    ("network", NetworkConfig),
    ("critic", CriticConfig),
    ("exploration", ExplorationConfig),
    ("learner", LearnerConfig),
    ("run", RunConfig),
)


@dataclass
class TrainConfig:
    """Complete configuration of one run."""
    env: EnvConfig
    network: NetworkConfig
    critic: CriticConfig
    exploration: ExplorationConfig
    learner: LearnerConfig
    run: RunConfig

    def __init__(
        self,
        env: Optional[EnvConfig] = None,
        network: Optional[NetworkConfig] = None,
        critic: Optional[CriticConfig] = None,
        exploration: Optional[ExplorationConfig] = None,
        learner: Optional[LearnerConfig] = None,
        run: Optional[RunConfig] = None,
    ):
        self.env = env or EnvConfig()
        self.network = network or NetworkConfig()
        self.critic = critic or CriticConfig()
        self.exploration = exploration or ExplorationConfig()
        self.learner = learner or LearnerConfig()
        self.run = run or RunConfig()

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: asdict(getattr(self, name)) for name, _ in SECTIONS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base: Optional["TrainConfig"] = None) -> "TrainConfig":
        """Overlay `data` on `base`; unknown sections or keys are rejected."""
        if not isinstance(data, dict):
            raise ConfigError("配置文件顶层必须是对象")
        config = base or cls()
        known = dict(SECTIONS)
        updated = {}
        for section, values in data.items():
            if section not in known:
                raise ConfigError(f"未知配置段: {section}")
            if not isinstance(values, dict):
                raise ConfigError(f"配置段 {section} 必须是对象")
            allowed = {f.name for f in fields(known[section])}
            unknown = set(values) - allowed
            if unknown:
                raise ConfigError(f"未知配置项: {', '.join(f'{section}.{k}' for k in sorted(unknown))}")
            hints = get_type_hints(known[section])
            values = {k: _typed(f"{section}.{k}", v, hints[k]) for k, v in values.items()}
            updated[section] = replace(getattr(config, section), **values)
        merged = cls(**{name: updated.get(name, getattr(config, name)) for name, _ in SECTIONS})
        merged.validate()
        return merged

    def with_overrides(self, overrides: Dict[str, Any]) -> "TrainConfig":
        """Apply flat `section.key` overrides (command-line flags)."""
        nested: Dict[str, Dict[str, Any]] = {}
        for dotted, value in overrides.items():
            if "." not in dotted:
                raise ConfigError(f"覆盖项必须是 section.key 形式: {dotted}")
            section, key = dotted.split(".", 1)
            nested.setdefault(section, {})[key] = value
        return TrainConfig.from_dict(nested, base=self)

    def validate(self) -> None:
        """Range checks; raises ConfigError on the first violation."""
        env, critic, exp, learner, run = self.env, self.critic, self.exploration, self.learner, self.run
        checks = [
            (env.name in ENV_NAMES, f"env.name 必须是 {sorted(ENV_NAMES)} 之一"),
            (env.horizon >= 1, "env.horizon 必须 >= 1"),
            (0.0 <= env.gamma < 1.0, "env.gamma 必须在 [0, 1) 内"),
            (env.cost_limit >= 0.0, "env.cost_limit 必须非负"),
            (env.dt > 0.0, "env.dt 必须为正"),
            (env.noise_std >= 0.0 and env.init_perturbation >= 0.0, "噪声参数必须非负"),
            (all(w >= 1 for w in self.network.policy_hidden + self.network.critic_hidden),
             "网络宽度必须 >= 1"),
            (self.network.log_std_min < self.network.log_std_max, "log_std 范围非法"),
            (critic.n_critics >= 1 and critic.n_quantiles >= 1, "评论家数量与分位数必须 >= 1"),
            (0 <= critic.k_r < critic.n_critics * critic.n_quantiles, "critic.k_r 超出范围"),
            (0 <= critic.k_c < critic.n_critics * critic.n_quantiles, "critic.k_c 超出范围"),
            (critic.kappa > 0.0 and critic.lr > 0.0, "critic.kappa 与 critic.lr 必须为正"),
            (exp.beta_r >= 0.0 and exp.beta_c >= 0.0, "乐观系数必须非负"),
            (1 <= exp.cvar_alpha <= critic.n_quantiles, "exploration.cvar_alpha 必须在 [1, M] 内"),
            (0.0 < exp.delta_min <= exp.delta_init <= exp.delta_max, "需满足 0 < delta_min <= delta_init <= delta_max"),
            (exp.lr_delta >= 0.0, "exploration.lr_delta 必须非负"),
            (exp.recent_window >= 1 and exp.delta_update_interval >= 1, "窗口与间隔必须 >= 1"),
            (learner.batch_size >= 1, "learner.batch_size 必须 >= 1"),
            (0.0 <= learner.tau <= 1.0, "learner.tau 必须在 [0, 1] 内"),
            (learner.alm_c > 0.0, "learner.alm_c 必须为正"),
            (learner.lambda_init >= 0.0 and learner.lambda_lr >= 0.0, "拉格朗日参数必须非负"),
            (learner.init_temperature > 0.0, "learner.init_temperature 必须为正"),
            (learner.update_every >= 1 and learner.gradient_steps >= 1, "更新节奏必须 >= 1"),
            (0 <= learner.policy_update_steps <= learner.gradient_steps,
             "policy_update_steps 必须在 [0, gradient_steps] 内"),
            (learner.target_update_frequency >= 1, "target_update_frequency 必须 >= 1"),
            (run.total_steps >= 0 and run.initial_steps >= 0, "步数必须非负"),
            (run.buffer_size >= 1 and run.num_envs >= 1, "缓冲区与环境数必须 >= 1"),
            (run.log_interval >= 1 and run.eval_interval >= 1, "日志与评估间隔必须 >= 1"),
            (run.eval_episodes >= 0 and run.bias_states >= 0 and run.bias_rollouts >= 1,
             "评估参数非法"),
            (run.checkpoint_interval >= 0, "run.checkpoint_interval 必须非负"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


def _typed(key: str, value: Any, annotation: Any) -> Any:
    """Check `value` against a field annotation; ints widen to float, nothing else converts."""
    if get_origin(annotation) is Union:
        if value is None:
            return None
        annotation = next(a for a in get_args(annotation) if a is not type(None))
    if get_origin(annotation) in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"配置项 {key} 类型错误: 期望列表, 实际 {type(value).__name__}")
        item = get_args(annotation)[0]
        return [_typed(f"{key}[{i}]", v, item) for i, v in enumerate(value)]
    # bool is a subclass of int, so it is matched exactly
    if annotation is bool:
        ok = isinstance(value, bool)
    elif annotation is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif annotation is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, annotation)
    if not ok:
        raise ConfigError(
            f"配置项 {key} 类型错误: 期望 {annotation.__name__}, 实际 {type(value).__name__} ({value!r})")
    return value


ENV_NAMES = frozenset({"toy_velocity", "toy_sparse_goal"})

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "velocity": {},
    "sparse_goal": {
        "env": {"name": "toy_sparse_goal", "horizon": 100, "gamma": 0.975, "cost_limit": 10.0},
        "critic": {"n_quantiles": 32, "k_r": 0, "k_c": 0},
        "exploration": {"beta_r": 3.0, "beta_c": 3.0, "cvar_alpha": 16},
        "learner": {"lambda_init": 0.001, "lambda_lr": 5e-4, "entropy_autotune": False},
    },
}


class ConfigManager:
    """Loads a preset, overlays a JSON file and flag overrides, saves the result."""

    CONFIG_FILE = "config.resolved.json"

    def __init__(self, config_path: str = "", preset: str = "velocity"):
        self.config_path = config_path
        self.preset = preset
        self.config = self.load()

    def load(self) -> TrainConfig:
        """Load configuration from the preset and the optional file."""
        if self.preset not in PRESETS:
            raise ConfigError(f"未知预设: {self.preset}")
        config = TrainConfig.from_dict(PRESETS[self.preset])
        if not self.config_path:
            return config
        if not os.path.exists(self.config_path):
            raise ConfigError(f"配置文件不存在: {self.config_path}")
        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件解析失败: {e}") from e
        if isinstance(data, dict) and "preset" in data:
            data = dict(data)
            name = data.pop("preset")
            if name not in PRESETS:
                raise ConfigError(f"未知预设: {name}")
            self.preset = name
            config = TrainConfig.from_dict(PRESETS[name])
        try:
            return TrainConfig.from_dict(data, base=config)
        except TypeError as e:
            raise ConfigError(f"配置项类型错误: {e}") from e

    def apply_overrides(self, overrides: Dict[str, Any]) -> TrainConfig:
        """Command-line flags win over file values."""
        self.config = self.config.with_overrides(overrides)
        return self.config

    def save(self, out_dir: str) -> str:
        """Write the resolved configuration atomically into `out_dir`."""
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, self.CONFIG_FILE)
        data = {"preset": self.preset, **self.config.to_dict()}
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, ensure_ascii=False)
        os.replace(tmp, path)
        return path
