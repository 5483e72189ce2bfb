import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ..surgery.baselines import epoch0_ranking, parse_only, run_baselines
from ..surgery.config import TrainConfig
from ..utils.io import ensure_dir, load_json, save_json
from .jsonl import jsonl_task
from .metrics import relative_performance
from .planted import generate_planted_task
from .tasks import BenchTask, PlantedShiftSpec, TaskSpec

logger = logging.getLogger(__name__)

ROW_LABELS = {
    "full": "Full-model",
    **{f"top-{k}": f"Top {k}" for k in range(1, 6)},
    "bottom-1": "Bottom 1",
}
TABLE_INDEX_NAME = "Layers finetuned"
SWEEP_TABLE = "sweep_table.csv"
SWEEP_REPORT = "sweep_report.json"
RELATIVE_PERFORMANCE = "relative_performance.csv"


@dataclass
class TaskOutcome:
    task_id: str
    metric: str
    status: str = "ok"
    error: Optional[str] = None
    results: Dict[str, float] = field(default_factory=dict)
    scores: Dict[str, float] = field(default_factory=dict)
    ranking: List[str] = field(default_factory=list)
    trials: List[Dict[str, Any]] = field(default_factory=list)
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def relative_performance(self) -> Optional[float]:
        """Best surgical top-k minus full fine-tuning, in percentage points."""
        if self.failed or "full" not in self.results:
            return None
        surgical = [v for name, v in self.results.items() if name.startswith("top-")]
        if not surgical:
            return None
        return relative_performance(max(surgical), self.results["full"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "metric": self.metric,
            "status": self.status,
            "error": self.error,
            "results": dict(self.results),
            "relative_performance": self.relative_performance(),
            "scores": dict(self.scores),
            "ranking": list(self.ranking),
            "trials": list(self.trials),
            "manifest": dict(self.manifest),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskOutcome":
        return cls(
            task_id=data["task_id"],
            metric=data.get("metric", ""),
            status=data.get("status", "ok"),
            error=data.get("error"),
            results={k: float(v) for k, v in data.get("results", {}).items()},
            scores=data.get("scores", {}),
            ranking=data.get("ranking", []),
            trials=data.get("trials", []),
            manifest=data.get("manifest", {}),
        )


@dataclass
class SweepReport:
    """Metric per (mask variant, task), laid out as a results table."""
    variants: List[str]
    outcomes: List[TaskOutcome] = field(default_factory=list)

    @property
    def failed(self) -> List[str]:
        return [o.task_id for o in self.outcomes if o.failed]

    @property
    def task_ids(self) -> List[str]:
        return [o.task_id for o in self.outcomes]

    def to_frame(self, only: Optional[Sequence[str]] = None) -> pd.DataFrame:
        variants = [v for v in self.variants if not only or v in parse_only(only)]
        data = {
            o.task_id: [o.results.get(v, np.nan) for v in variants] for o in self.outcomes
        }
        frame = pd.DataFrame(data, index=[ROW_LABELS[v] for v in variants])
        frame.index.name = TABLE_INDEX_NAME
        return frame

    def relative_frame(self) -> pd.DataFrame:
        rows = [
            {"task": o.task_id, "relative_performance": o.relative_performance()}
            for o in self.outcomes
            if o.relative_performance() is not None
        ]
        return pd.DataFrame(rows, columns=["task", "relative_performance"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variants": list(self.variants),
            "tasks": [o.to_dict() for o in self.outcomes],
            "failed": self.failed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepReport":
        return cls(
            variants=list(data["variants"]),
            outcomes=[TaskOutcome.from_dict(t) for t in data.get("tasks", [])],
        )


def materialize_task(spec: TaskSpec) -> BenchTask:
    if isinstance(spec.source, PlantedShiftSpec):
        return generate_planted_task(spec.source, spec.seed, task_spec=spec)
    return jsonl_task(spec)


class SweepOrchestrator:
    """Runs the baseline trials for every task and collects them into one report."""

    def __init__(
        self,
        train_config: TrainConfig,
        output_dir: Optional[Path] = None,
        only: Optional[Sequence[str]] = None,
        keep_checkpoints: bool = False,
    ):
        self.train_config = train_config
        self.output_dir = Path(output_dir) if output_dir else None
        self.variants = list(parse_only(only))
        self.keep_checkpoints = keep_checkpoints

    def run_task(self, task: Union[TaskSpec, BenchTask]) -> TaskOutcome:
        bench_task = materialize_task(task) if isinstance(task, TaskSpec) else task
        spec = bench_task.spec
        policy = spec.probe

        model = bench_task.model_factory()
        scores, ranking = epoch0_ranking(
            model,
            bench_task.probe,
            mode=policy.mode,
            normalized=policy.normalized,
            num_samples=policy.num_samples,
        )
        logger.info(f"{spec.task_id}: epoch-0 ranking {ranking.ordered_names}")

        checkpoint_root = None
        if self.keep_checkpoints and self.output_dir is not None:
            checkpoint_root = self.output_dir / "checkpoints" / spec.task_id
        trials = run_baselines(
            bench_task.model_factory,
            bench_task.data,
            self.train_config,
            ranking=ranking,
            metric=spec.metric,
            task_id=spec.task_id,
            only=self.variants,
            checkpoint_root=checkpoint_root,
        )
        return TaskOutcome(
            task_id=spec.task_id,
            metric=spec.metric.value,
            results={t.variant: t.final_metric for t in trials},
            scores=scores.as_dict(),
            ranking=ranking.ordered_names,
            trials=[t.to_dict() for t in trials],
            manifest={**bench_task.manifest, "ranking_digest": ranking.digest()},
        )

    def run(self, tasks: Sequence[Union[TaskSpec, BenchTask]]) -> SweepReport:
        report = SweepReport(variants=self.variants)
        for task in tasks:
            task_id = task.task_id
            metric = task.metric if isinstance(task, TaskSpec) else task.spec.metric
            logger.info(f"Running sweep task {task_id}...")
            try:
                outcome = self.run_task(task)
                logger.info(f"✓ {task_id} completed: {outcome.results}")
            except Exception as e:
                logger.error(f"✗ {task_id} failed: {e}")
                outcome = TaskOutcome(
                    task_id=task_id, metric=metric.value, status="failed", error=str(e)
                )
            report.outcomes.append(outcome)
        return report


def run_sweep(
    tasks: Sequence[Union[TaskSpec, BenchTask]],
    config: TrainConfig,
    only: Optional[Sequence[str]] = None,
    output_dir: Optional[Path] = None,
    keep_checkpoints: bool = False,
) -> SweepReport:
    return SweepOrchestrator(config, output_dir, only, keep_checkpoints).run(tasks)


def write_report_tables(
    report: SweepReport, out_dir: Path, only: Optional[Sequence[str]] = None
) -> Dict[str, Path]:
    """Results table (three decimals) and the (task, relative_performance) plot data."""
    out_dir = ensure_dir(Path(out_dir))
    table_path = out_dir / SWEEP_TABLE
    report.to_frame(only).to_csv(table_path, float_format="%.3f")
    relative_path = out_dir / RELATIVE_PERFORMANCE
    report.relative_frame().to_csv(relative_path, index=False, float_format="%.3f")
    return {"table": table_path, "relative_performance": relative_path}


def write_sweep_report(
    report: SweepReport,
    out_dir: Path,
    run_config: Optional[Dict[str, Any]] = None,
    input_digests: Optional[Dict[str, str]] = None,
    only: Optional[Sequence[str]] = None,
) -> Dict[str, Path]:
    paths = write_report_tables(report, out_dir, only)
    paths["report"] = save_json(
        {
            **report.to_dict(),
            "run_config": run_config or {},
            "input_digests": input_digests or {},
        },
        Path(out_dir) / SWEEP_REPORT,
    )
    logger.info(f"✓ Wrote sweep report to {out_dir}")
    return paths


def read_sweep_report(path: Path) -> SweepReport:
    return SweepReport.from_dict(load_json(path))
