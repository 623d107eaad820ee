import json
import os

import pytest

import core.training
import main as cli
from core.errors import NumericDivergenceError
from core.metrics import MetricsRecord, MetricsWriter
from ui.plots import PANELS, emit_plots, resolve_cost_limit


@pytest.fixture
def config_file(tiny_config, tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config.to_dict()), encoding="utf-8")
    return str(path)


class TestCli:
    def test_usage_error_exits_one(self):
        with pytest.raises(SystemExit) as info:
            cli.main([])
        assert info.value.code == cli.EXIT_USAGE

    def test_train_eval_resume(self, config_file, tmp_path):
        out = str(tmp_path / "cli_run")
        assert cli.main(["train", "--config", config_file, "--out", out, "--steps", "80"]) == 0
        for name in ("config.resolved.json", "train.log", "metrics.jsonl", "metrics.csv",
                     "checkpoint.npz"):
            assert os.path.exists(os.path.join(out, name))

        checkpoint = os.path.join(out, "checkpoint.npz")
        episodes = str(tmp_path / "episodes.jsonl")
        assert cli.main(["eval", "--checkpoint", checkpoint, "--episodes", "2", "--seed", "3",
                         "--out", episodes]) == 0
        assert len(open(episodes, encoding="utf-8").readlines()) == 2

        assert cli.main(["train", "--resume", checkpoint, "--out", out, "--steps", "120"]) == 0

    def test_missing_checkpoint(self, tmp_path):
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "none.npz"),
                         "--episodes", "1", "--seed", "0"])
        assert code == cli.EXIT_USAGE

    def test_bad_config_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"critic": {"n_quantiles": 0}}), encoding="utf-8")
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "x")]) == 1

    def test_verify_exit_codes(self):
        assert cli.main(["verify", "--suite", "lemma2", "--cases", "10"]) == cli.EXIT_OK
        assert cli.main(["verify", "--suite", "lemma1", "--cases", "10",
                         "--tol", "1e-300"]) == cli.EXIT_VERIFY_FAILED
        assert cli.main(["verify", "--suite", "nope", "--cases", "10"]) == cli.EXIT_USAGE

    def test_divergence_exit_code(self, monkeypatch, config_file, tmp_path):
        def diverge(*args, **kwargs):
            raise NumericDivergenceError("评论家网络输出非有限值")
        monkeypatch.setattr(core.training, "run_train", diverge)
        code = cli.main(["train", "--config", config_file, "--out", str(tmp_path / "d")])
        assert code == cli.EXIT_DIVERGED

    def test_malformed_metrics(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        path.write_text('{"step": 1}\n{"step": "two"}\n', encoding="utf-8")
        code = cli.main(["plot", "--metrics", str(path), "--out", str(tmp_path / "plots")])
        assert code == cli.EXIT_USAGE


class TestPlots:
    def test_empty_metrics_gives_labelled_axes(self, tmp_path):
        metrics = tmp_path / "metrics.jsonl"
        metrics.write_text("", encoding="utf-8")
        paths = emit_plots(str(metrics), str(tmp_path / "plots"))
        assert sorted(os.path.basename(p) for p in paths) == sorted(f"{m}.svg" for m in PANELS)
        svg = open(paths[0], encoding="utf-8").read()
        assert "<svg" in svg

    def test_rerender_is_byte_identical(self, tmp_path):
        metrics = str(tmp_path / "metrics.jsonl")
        writer = MetricsWriter(metrics)
        writer.append(MetricsRecord(step=10, episode_cost=2.0, episode_return=1.0))
        writer.append(MetricsRecord(step=20, episode_cost=6.0, episode_return=3.0))
        first = emit_plots(metrics, str(tmp_path / "a"), cost_limit=5.0)
        second = emit_plots(metrics, str(tmp_path / "b"), cost_limit=5.0)
        for a, b in zip(first, second):
            assert open(a, "rb").read() == open(b, "rb").read()

    def test_cost_limit_from_resolved_config(self, tmp_path):
        (tmp_path / "config.resolved.json").write_text(
            json.dumps({"env": {"cost_limit": 12.5}}), encoding="utf-8")
        assert resolve_cost_limit(str(tmp_path / "metrics.jsonl")) == 12.5

    def test_cost_limit_default(self, tmp_path):
        assert resolve_cost_limit(str(tmp_path / "metrics.jsonl")) == 5.0
