"""Line charts of a metrics stream as deterministic SVG files."""

import json
import logging
import os
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")

from matplotlib import rc_context  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from config import ConfigManager, EnvConfig  # noqa: E402
from core.metrics import MetricsRecord, read_metrics  # noqa: E402
from .styles import COLORS, PLOT_RC, SERIES_COLORS  # noqa: E402

logger = logging.getLogger(__name__)

# metric -> (title, y label, draws the cost limit)
PANELS = {
    "episode_return": ("Training episode return", "return", False),
    "episode_cost": ("Training episode cost", "cost", True),
    "eval_return": ("Evaluation return", "return", False),
    "eval_cost": ("Evaluation cost", "cost", True),
    "cost_bias": ("Cost estimation bias", "critic - oracle", False),
    "conflict_ratio": ("Gradient conflict ratio", "ratio", False),
}

SVG_METADATA = {"Date": None, "Creator": None}


def resolve_cost_limit(metrics_path: str) -> float:
    """Cost limit from the run's resolved config, or the default."""
    resolved = os.path.join(os.path.dirname(os.path.abspath(metrics_path)),
                            ConfigManager.CONFIG_FILE)
    try:
        with open(resolved, "r", encoding="utf-8") as f:
            return float(json.load(f)["env"]["cost_limit"])
    except (OSError, KeyError, TypeError, ValueError):
        return EnvConfig().cost_limit


def render_panel(records: List[MetricsRecord], metric: str, path: str,
                 cost_limit: Optional[float]) -> str:
    title, ylabel, with_limit = PANELS[metric]
    points = [(r.step, getattr(r, metric)) for r in records if getattr(r, metric) is not None]
    with rc_context(PLOT_RC):
        fig = Figure()
        ax = fig.add_subplot(1, 1, 1)
        if points:
            xs, ys = zip(*points)
            ax.plot(xs, ys, color=SERIES_COLORS[metric], marker="o" if len(points) < 3 else None,
                    markersize=3, label=metric)
        if with_limit and cost_limit is not None:
            ax.axhline(cost_limit, color=COLORS["accent_red"], linestyle="--", linewidth=1.0,
                       label="cost limit")
        ax.set_title(title)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
    return path


def emit_plots(metrics_path: str, out_dir: str, cost_limit: Optional[float] = None) -> List[str]:
    """One SVG per metric; an empty stream gives labelled empty axes."""
    records = read_metrics(metrics_path)
    if cost_limit is None:
        cost_limit = resolve_cost_limit(metrics_path)
    os.makedirs(out_dir, exist_ok=True)
    paths = [render_panel(records, metric, os.path.join(out_dir, f"{metric}.svg"), cost_limit)
             for metric in PANELS]
    logger.info("已生成 %d 张图表 -> %s", len(paths), out_dir)
    return paths
