#!/usr/bin/env python3
"""COX-Q desk - command-line entry point."""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from config import PRESETS, ConfigManager
from core.errors import CheckpointError, ConfigError, CoxError, MetricsFormatError, NumericDivergenceError
from ui.log_format import add_file_log, log_success, setup_logging

logger = logging.getLogger("cox_q")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY_FAILED = 2
EXIT_DIVERGED = 3


class CliParser(argparse.ArgumentParser):
    """Usage errors exit with code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: 错误: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="cox-q", description="成本约束乐观探索 (COX-Q) 桌面实验")
    parser.add_argument("-v", "--verbose", action="store_true", help="输出调试日志")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    train = sub.add_parser("train", help="训练")
    train.add_argument("--config", default="", help="JSON 配置文件")
    train.add_argument("--preset", default="velocity", choices=sorted(PRESETS))
    train.add_argument("--seed", type=int)
    train.add_argument("--out", help="输出目录 (覆盖 run.out_dir)")
    train.add_argument("--no-cox", action="store_true", help="关闭 COX 探索")
    train.add_argument("--steps", type=int, help="总步数 (覆盖 run.total_steps)")
    train.add_argument("--resume", help="从检查点继续训练")

    evaluate = sub.add_parser("eval", help="评估检查点")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--episodes", type=int, required=True)
    evaluate.add_argument("--seed", type=int, required=True)
    evaluate.add_argument("--out", help="逐回合记录 (JSON lines)")

    verify = sub.add_parser("verify", help="运行验证套件")
    verify.add_argument("--suite", required=True)
    verify.add_argument("--cases", type=int, required=True)
    verify.add_argument("--tol", type=float)
    verify.add_argument("--seed", type=int, default=0)

    plot = sub.add_parser("plot", help="绘制指标曲线")
    plot.add_argument("--metrics", required=True)
    plot.add_argument("--out", required=True)
    plot.add_argument("--cost-limit", type=float)
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    from core.training import run_train

    if args.resume:
        path = run_train(None, out_dir=args.out, resume_from=args.resume, total_steps=args.steps)
        log_success(logger, "训练完成, 检查点: %s", path)
        return EXIT_OK

    manager = ConfigManager(args.config, preset=args.preset)
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out:
        overrides["run.out_dir"] = args.out
    if args.no_cox:
        overrides["exploration.enabled"] = False
    if args.steps is not None:
        overrides["run.total_steps"] = args.steps
    config = manager.apply_overrides(overrides)
    out_dir = config.run.out_dir
    manager.save(out_dir)
    add_file_log(os.path.join(out_dir, "train.log"))
    path = run_train(config, out_dir=out_dir)
    log_success(logger, "训练完成, 检查点: %s", path)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from core.evaluation import write_episodes
    from core.training import run_eval

    if args.episodes < 0:
        raise ConfigError("--episodes 必须非负")
    summary = run_eval(args.checkpoint, args.episodes, args.seed)
    print(json.dumps(summary.to_dict(), ensure_ascii=False, indent=2))
    if args.out:
        write_episodes(args.out, summary)
    log_success(logger, "评估完成: %d 个回合", summary.n_episodes)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    from core.verify import run_verify

    report = run_verify(args.suite, args.cases, seed=args.seed, tol=args.tol)
    print(json.dumps({
        "suite": report.suite.value,
        "passed": report.passed,
        "max_deviation": report.max_deviation,
        "tolerance": report.tolerance,
        "n_cases": report.n_cases,
        "n_failed": report.n_failed,
        "failures": report.failures,
    }, ensure_ascii=False, indent=2))
    if report.passed:
        log_success(logger, report.summary())
        return EXIT_OK
    return EXIT_VERIFY_FAILED


def cmd_plot(args: argparse.Namespace) -> int:
    from ui.plots import emit_plots

    paths = emit_plots(args.metrics, args.out, cost_limit=args.cost_limit)
    log_success(logger, "已生成 %d 张图表", len(paths))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "plot": cmd_plot,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    setup_logging(verbose=args.verbose)
    try:
        return COMMANDS[args.command](args)
    except NumericDivergenceError as e:
        logger.error("数值发散: %s", e)
        return EXIT_DIVERGED
    except (ConfigError, CheckpointError, MetricsFormatError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except CoxError as e:
        logger.error("参数错误: %s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
