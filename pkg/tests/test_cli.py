import json
from unittest.mock import patch

import pytest

from fisher_surgery.bench.orchestrator import SweepReport, TaskOutcome
from fisher_surgery.cli.config import load_run_config
from fisher_surgery.cli.main import EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, main
from fisher_surgery.utils.errors import ConfigurationError

from .helpers import planted_task_entry


def _write_config(tmp_path, tasks, **extra):
    config = {
        "seed": 0,
        "train": {"epochs": 1, "learning_rate": 0.01, "batch_size": 8},
        "probe": {"size": 8},
        "output": {"dir": str(tmp_path / "runs")},
        "tasks": tasks,
        **extra,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


# ---- Config resolution ----

def test_seed_flag_reaches_every_section(tmp_path):
    path = _write_config(tmp_path, [planted_task_entry("a")])
    config = load_run_config(path, {"seed": 7})
    assert config.seed == 7
    assert (config.model.seed, config.train.seed, config.probe.seed) == (7, 7, 7)
    assert config.tasks[0].seed == 7
    assert config.tasks[0].probe.seed == 7
    assert config.provenance.overrides == {"seed": 7}


def test_tasks_inherit_probe_policy(tmp_path):
    entry = planted_task_entry("a")
    entry["probe"] = {"seed": 3}
    config = load_run_config(_write_config(tmp_path, [entry]), {"probe.size": 5})
    assert config.tasks[0].probe.size == 5
    assert config.tasks[0].probe.seed == 3


def test_bad_config_names_the_key(tmp_path):
    path = _write_config(tmp_path, [], train={"epochs": 0})
    with pytest.raises(ConfigurationError) as exc:
        load_run_config(path)
    assert exc.value.key == "train.epochs"


# ---- Commands ----

def test_sweep_writes_table(tmp_path, capsys):
    config = _write_config(tmp_path, [planted_task_entry("planted")])
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config), "--out", str(out), "--only", "top-1,full"])
    assert code == EXIT_OK

    table = (out / "sweep_table.csv").read_text().splitlines()
    assert table[0] == "Layers finetuned,planted"
    assert [line.split(",")[0] for line in table[1:]] == ["Full-model", "Top 1"]
    report = json.loads((out / "sweep_report.json").read_text())
    assert report["failed"] == []
    assert report["run_config"]["train"]["epochs"] == 1
    assert list(out.glob("fim_sweep_*.log"))
    assert "Full-model" in capsys.readouterr().out


def test_sweep_with_failed_task_exits_partial(tmp_path):
    tasks = [
        planted_task_entry("planted"),
        {"task_id": "missing", "source": {"type": "jsonl", "path": str(tmp_path / "nope.jsonl")}},
    ]
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(_write_config(tmp_path, tasks)), "--out", str(out), "--only", "full"])
    assert code == EXIT_PARTIAL
    report = json.loads((out / "sweep_report.json").read_text())
    assert report["failed"] == ["missing"]


def test_sweep_usage_errors(tmp_path):
    empty = _write_config(tmp_path, [])
    assert main(["sweep", "--config", str(empty), "--out", str(tmp_path / "a")]) == EXIT_USAGE

    config = _write_config(tmp_path, [planted_task_entry("planted")])
    assert main(["sweep", "--config", str(config), "--out", str(tmp_path / "b"), "--only", "top-9"]) == EXIT_USAGE
    assert main(["sweep", "--config", str(tmp_path / "absent.json")]) == EXIT_USAGE


def test_score_then_rank(tmp_path, capsys):
    config = _write_config(tmp_path, [planted_task_entry("planted")])
    out = tmp_path / "score"
    assert main(["score", "--config", str(config), "--task", "planted", "--out", str(out), "--k", "1"]) == EXIT_OK

    scores = json.loads((out / "scores.json").read_text())
    assert scores["probe_size"] == 8
    assert sorted(scores["scores"]) == ["layer_0", "layer_1"]
    assert "timestamp" in scores
    assert "LAYER RANKING" in capsys.readouterr().out

    assert main(["rank", "--scores", str(out / "scores.json"), "--k", "9"]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "top-2 selection" in printed


def test_rank_missing_score_file(tmp_path):
    assert main(["rank", "--scores", str(tmp_path / "none.json")]) == EXIT_USAGE


def test_score_missing_dataset(tmp_path):
    config = _write_config(tmp_path, [])
    code = main(["score", "--config", str(config), "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "o")])
    assert code == EXIT_USAGE


def test_finetune_then_stability(tmp_path, capsys):
    config = _write_config(tmp_path, [planted_task_entry("planted")])
    tune_out = tmp_path / "tune"
    code = main(["finetune", "--config", str(config), "--task", "planted", "--k", "1", "--out", str(tune_out)])
    assert code == EXIT_OK
    trial = json.loads((tune_out / "trial.json").read_text())
    assert trial["trial"]["variant"] == "top-1"
    assert sorted((tune_out / "checkpoints").glob("ckpt_epoch*.json"))

    stab_out = tmp_path / "stability"
    code = main([
        "stability", "--config", str(config), "--task", "planted",
        "--checkpoints", str(tune_out / "checkpoints"), "--out", str(stab_out),
    ])
    assert code == EXIT_OK
    trajectory = json.loads((stab_out / "trajectory.json").read_text())
    assert [e["epoch"] for e in trajectory["epochs"]] == [0, 1]
    assert trajectory["deviation"]["kendall_tau"][0] == 1.0
    assert (stab_out / "rank_plot.csv").exists()
    assert "RANK STABILITY" in capsys.readouterr().out


def test_stability_needs_two_checkpoints(tmp_path):
    config = _write_config(tmp_path, [planted_task_entry("planted")])
    empty = tmp_path / "ckpts"
    empty.mkdir()
    code = main([
        "stability", "--config", str(config), "--task", "planted",
        "--checkpoints", str(empty), "--out", str(tmp_path / "s"),
    ])
    assert code == EXIT_USAGE


def test_report_rerenders_tables(tmp_path, capsys):
    config = _write_config(tmp_path, [planted_task_entry("planted")])
    sweep_out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(config), "--out", str(sweep_out), "--only", "full,top-1"]) == EXIT_OK
    capsys.readouterr()

    report_out = tmp_path / "report"
    code = main(["report", "--report", str(sweep_out / "sweep_report.json"), "--only", "top-1", "--out", str(report_out)])
    assert code == EXIT_OK
    lines = (report_out / "sweep_table.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines] == ["Layers finetuned", "Top 1"]
    assert (report_out / "relative_performance.csv").exists()
    assert "Top 1" in capsys.readouterr().out


def test_sweep_exit_code_follows_report(tmp_path):
    """The exit code comes from the report, not from how the tasks ran."""
    config = _write_config(tmp_path, [planted_task_entry("a"), planted_task_entry("b")])
    report = SweepReport(
        variants=["full"],
        outcomes=[
            TaskOutcome("a", "accuracy", results={"full": 0.9}),
            TaskOutcome("b", "accuracy", status="failed", error="boom"),
        ],
    )
    with patch("fisher_surgery.cli.main.run_sweep", return_value=report) as mock_sweep:
        code = main(["sweep", "--config", str(config), "--out", str(tmp_path / "out"), "--only", "full"])

    assert code == EXIT_PARTIAL
    mock_sweep.assert_called_once()
    assert mock_sweep.call_args.kwargs["only"] == ["full"]
    assert [t.task_id for t in mock_sweep.call_args.args[0]] == ["a", "b"]
