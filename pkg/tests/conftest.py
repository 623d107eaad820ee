import numpy as np
import pytest

from config import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config(tmp_path):
    """A run small enough to finish in a couple of seconds."""
    return TrainConfig.from_dict({
        "env": {"horizon": 20},
        "network": {"policy_hidden": [8], "critic_hidden": [8]},
        "critic": {"n_critics": 2, "n_quantiles": 5, "k_r": 1, "k_c": 1},
        "exploration": {"cvar_alpha": 3, "delta_update_interval": 10, "recent_window": 50},
        "learner": {"batch_size": 16},
        "run": {"total_steps": 120, "initial_steps": 30, "buffer_size": 500,
                "log_interval": 40, "eval_interval": 60, "eval_episodes": 2,
                "bias_states": 2, "bias_rollouts": 2, "out_dir": str(tmp_path / "run"),
                "log_wall_time": False},
    })
