import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from ..bench.jsonl import jsonl_task
from ..bench.metrics import MetricKind
from ..bench.orchestrator import (
    materialize_task,
    read_sweep_report,
    run_sweep,
    write_report_tables,
    write_sweep_report,
)
from ..bench.tasks import BenchTask, RecordSchema, TaskSpec
from ..fisher.estimator import EstimatorMode
from ..fisher.ranking import LayerRanking, LayerScoreVector, select_layers
from ..fisher.score_file import read_score_file, write_score_file
from ..models.base import LayeredClassifier
from ..models.config import ModelConfig
from ..models.data_classes import TaskKind
from ..models.reference import build_from_config
from ..stability.tracker import deviation, track, write_trajectory
from ..storage.snapshot import (
    ParameterSnapshot,
    list_checkpoints,
    load_snapshot,
    restore,
    snapshot,
)
from ..surgery.baselines import epoch0_ranking
from ..surgery.engine import finetune
from ..surgery.mask import FreezeMask, SelectionEnd
from ..utils.config import parse_config
from ..utils.errors import (
    ConfigurationError,
    FisherSurgeryError,
    InputError,
    RefusalError,
    SnapshotError,
)
from ..utils.io import load_json, save_json, sha256_file, timestamped_outdir
from .config import RunConfig, load_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


def _setup_logging(out_dir: Optional[Path], command: str, verbose: bool) -> None:
    """Log to a timestamped file in the output directory and to the console."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if out_dir is not None:
        log_file = out_dir / f"fim_{command}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )
    logger.info(f"Starting fim {command}")
    if out_dir is not None:
        logger.info(f"Output directory: {out_dir}")


def _parse_label_map(text: Optional[str]) -> Dict[str, Any]:
    """Accepts a JSON object or `name=value,name=value`."""
    if not text:
        return {}
    if text.strip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"invalid JSON ({e.msg})", key="label_map") from e
        if not isinstance(data, dict):
            raise ConfigurationError("must be a JSON object", key="label_map")
        return data
    mapping: Dict[str, Any] = {}
    for item in text.split(","):
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"expected name=value, got {item!r}", key="label_map")
        try:
            mapping[name.strip()] = int(value)
        except ValueError:
            mapping[name.strip()] = float(value)
    return mapping


def _split_only(text: Optional[str]) -> Optional[List[str]]:
    if not text:
        return None
    return [part.strip() for part in text.split(",") if part.strip()]


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "seed": args.seed,
        "probe.size": args.probe_size,
        "train.epochs": args.epochs,
        "probe.mode": getattr(args, "mode", None),
        "probe.normalized": True if getattr(args, "normalized", False) else None,
    }


def _load_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(Path(args.config) if args.config else None, _overrides(args))


def _output_dir(args: argparse.Namespace, config: RunConfig, command: str) -> Path:
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return out
    return timestamped_outdir(config.output.dir, prefix=command)


def _input_digests(args: argparse.Namespace) -> Dict[str, str]:
    digests = {}
    for key in ("config", "model", "data", "eval_data", "scores", "report"):
        value = getattr(args, key, None)
        if value and Path(value).is_file():
            digests[key] = sha256_file(Path(value))
    return digests


def _resolve_model(
    args: argparse.Namespace, config: RunConfig
) -> Tuple[ModelConfig, Optional[ParameterSnapshot]]:
    """--model is either a model-config JSON or a snapshot manifest."""
    if not args.model:
        return config.model, None
    data = load_json(Path(args.model))
    if isinstance(data, dict) and "content_digest" in data:
        snap = load_snapshot(Path(args.model))
        return parse_config(ModelConfig, snap.model_config, prefix="model"), snap
    if not isinstance(data, dict):
        raise ConfigurationError("model config must be a JSON object", key="model")
    data.setdefault("seed", config.seed)
    return parse_config(ModelConfig, data, prefix="model"), None


def _factory(
    model_config: ModelConfig, snap: Optional[ParameterSnapshot]
) -> Callable[[], LayeredClassifier]:
    def build() -> LayeredClassifier:
        model = build_from_config(model_config)
        if snap is not None:
            restore(model, snap)
        return model

    return build


def _resolve_task(
    args: argparse.Namespace,
    config: RunConfig,
    model_config: ModelConfig,
    snap: Optional[ParameterSnapshot] = None,
    keep_task_model: bool = False,
) -> BenchTask:
    if getattr(args, "task", None):
        bench_task = materialize_task(config.task(args.task))
        if not keep_task_model:
            bench_task.model_factory = _factory(model_config, snap)
        return bench_task

    if getattr(args, "data", None):
        data_path = Path(args.data)
        if not data_path.exists():
            raise FileNotFoundError(f"Dataset file not found: {data_path}")
        schema = args.schema or (
            RecordSchema.single_text.value if model_config.is_text else RecordSchema.features.value
        )
        if args.metric:
            metric = args.metric
        elif model_config.task_kind == TaskKind.regression:
            metric = MetricKind.pearson.value
        else:
            metric = MetricKind.accuracy.value
        spec = parse_config(
            TaskSpec,
            {
                "task_id": data_path.stem,
                "task_kind": model_config.task_kind.value,
                "metric": metric,
                "num_classes": model_config.num_classes,
                "source": {
                    "type": "jsonl",
                    "path": str(data_path),
                    "eval_path": args.eval_data,
                    "schema": schema,
                    "label_map": _parse_label_map(args.label_map),
                    "split_seed": config.seed,
                },
                "probe": config.probe.model_dump(mode="json"),
                "model": model_config.model_dump(mode="json"),
                "seed": config.seed,
            },
            prefix="task",
        )
        bench_task = jsonl_task(spec)
        if snap is not None:
            bench_task.model_factory = _factory(model_config, snap)
        return bench_task

    if len(config.tasks) == 1:
        bench_task = materialize_task(config.tasks[0])
        if not keep_task_model:
            bench_task.model_factory = _factory(model_config, snap)
        return bench_task
    raise ConfigurationError("pass --data or --task to choose the probe source", key="data")


def _clamp_k(k: int, num_layers: int) -> int:
    if k > num_layers:
        logger.warning(f"k={k} exceeds {num_layers} ranked layers, clamped to {num_layers}")
        return num_layers
    return k


def _print_ranking(scores: LayerScoreVector, ranking: LayerRanking, k: int, end: str) -> None:
    print(f"\n{'=' * 50}")
    print(f"LAYER RANKING ({scores.estimator_mode}, probe={scores.probe_size})")
    print(f"{'=' * 50}")
    values = scores.as_dict()
    for position, name in enumerate(ranking.ordered_names, start=1):
        print(f"{position:>3}. {name:<12} {values[name]:.6g}")
    k = _clamp_k(k, ranking.num_layers)
    mask = select_layers(ranking, k, end)
    print(f"\n{end}-{k} selection, trainable: {', '.join(mask.trainable_groups)}")


def cmd_score(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _output_dir(args, config, "score")
    _setup_logging(out, "score", args.verbose)

    model_config, snap = _resolve_model(args, config)
    bench_task = _resolve_task(
        args, config, model_config, snap, keep_task_model=not args.model
    )
    policy = bench_task.spec.probe
    model = bench_task.model_factory()
    scores, ranking = epoch0_ranking(
        model,
        bench_task.probe,
        mode=policy.mode,
        normalized=policy.normalized,
        num_samples=policy.num_samples,
    )
    write_score_file(
        out / "scores.json",
        scores,
        ranking,
        model_digest=snapshot(model).digest,
        run_config=config.manifest(),
        input_digests={**_input_digests(args), "probe": bench_task.probe.digest},
    )
    _print_ranking(scores, ranking, args.k, args.end)
    return EXIT_OK


def cmd_rank(args: argparse.Namespace) -> int:
    _setup_logging(None, "rank", args.verbose)
    scores, ranking, _ = read_score_file(Path(args.scores))
    _print_ranking(scores, ranking, args.k, args.end)
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _output_dir(args, config, "finetune")
    _setup_logging(out, "finetune", args.verbose)

    model_config, snap = _resolve_model(args, config)
    bench_task = _resolve_task(
        args, config, model_config, snap, keep_task_model=not args.model
    )
    policy = bench_task.spec.probe
    model = bench_task.model_factory()
    scores, ranking = epoch0_ranking(
        model,
        bench_task.probe,
        mode=policy.mode,
        normalized=policy.normalized,
        num_samples=policy.num_samples,
    )
    write_score_file(
        out / "scores.json",
        scores,
        ranking,
        model_digest=snapshot(model).digest,
        run_config=config.manifest(),
        input_digests=_input_digests(args),
    )

    warnings = []
    if args.full:
        mask = FreezeMask.full(model.partition.group_names)
    else:
        k = _clamp_k(args.k, ranking.num_layers)
        if k != args.k:
            warnings.append(f"k={args.k} clamped to {k}")
        mask = select_layers(ranking, k, args.end)

    result = finetune(
        model,
        mask,
        bench_task.data,
        config.train,
        metric=bench_task.spec.metric,
        checkpoint_dir=out / "checkpoints",
        task_id=bench_task.task_id,
        warnings=warnings,
    )
    save_json(
        {
            "trial": result.to_dict(),
            "ranking": ranking.ordered_names,
            "task_manifest": bench_task.manifest,
            "run_config": config.manifest(),
            "input_digests": _input_digests(args),
        },
        out / "trial.json",
    )
    print(f"\n{result.variant}: final {result.metric} = {result.final_metric:.4f}")
    print(f"Checkpoints: {out / 'checkpoints'}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _load_config(args)
    if not config.tasks:
        raise ConfigurationError("the sweep needs at least one task", key="tasks")
    out = _output_dir(args, config, "sweep")
    _setup_logging(out, "sweep", args.verbose)

    only = _split_only(args.only)
    report = run_sweep(
        config.tasks,
        config.train,
        only=only,
        output_dir=out,
        keep_checkpoints=config.output.keep_checkpoints,
    )
    write_sweep_report(
        report, out, run_config=config.manifest(), input_digests=_input_digests(args), only=only
    )
    print(report.to_frame(only).to_string(float_format="{:.3f}".format))
    if report.failed:
        print(f"\nFailed tasks: {', '.join(report.failed)}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_stability(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _output_dir(args, config, "stability")
    _setup_logging(out, "stability", args.verbose)

    paths = list_checkpoints(Path(args.checkpoints))
    if len(paths) < 2:
        raise InputError(f"need at least 2 checkpoints in {args.checkpoints}, found {len(paths)}")
    snaps = [load_snapshot(p) for p in paths]
    first = snaps[0]
    for path, snap in zip(paths[1:], snaps[1:]):
        if snap.architecture_digest != first.architecture_digest:
            raise SnapshotError(
                f"{path.name} has architecture {snap.architecture_digest}, "
                f"{paths[0].name} has {first.architecture_digest}"
            )

    model_config = parse_config(ModelConfig, first.model_config, prefix="model")
    bench_task = _resolve_task(args, config, model_config)
    policy = bench_task.spec.probe
    trajectory = track(
        snaps,
        _factory(model_config, None),
        bench_task.probe,
        mode=policy.mode,
        normalized=policy.normalized,
        seed=policy.seed,
        num_samples=policy.num_samples,
    )
    report = deviation(trajectory)
    write_trajectory(
        out,
        trajectory,
        report,
        run_config=config.manifest(),
        input_digests={
            **_input_digests(args),
            **{f"ckpt_epoch{s.epoch}": s.digest for s in snaps},
            "probe": bench_task.probe.digest,
        },
    )

    print(f"\n{'=' * 50}")
    print(f"RANK STABILITY (reference epoch {report.reference_epoch})")
    print(f"{'=' * 50}")
    for epoch, disp, tau in zip(report.epochs, report.displacement, report.kendall_tau):
        print(f"epoch {epoch:>3}: displacement={disp:.3f} tau={tau:.3f}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    _setup_logging(None, "report", args.verbose)
    report_path = Path(args.report)
    report = read_sweep_report(report_path)
    only = _split_only(args.only)
    out = Path(args.out) if args.out else report_path.parent
    write_report_tables(report, out, only)
    print(report.to_frame(only).to_string(float_format="{:.3f}".format))
    relative = report.relative_frame()
    if not relative.empty:
        print()
        print(relative.to_string(index=False, float_format="{:+.1f}".format))
    return EXIT_OK


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run config JSON (sections model, train, probe, tasks, output)")
    common.add_argument("--seed", type=int, help="Seed for every section (overrides the config)")
    common.add_argument("--probe-size", type=int, help="Probe examples drawn from the eval split")
    common.add_argument("--k", type=int, default=5, help="Number of layers to select (default: 5)")
    common.add_argument(
        "--end", choices=[e.value for e in SelectionEnd], default="top", help="Select from the top or bottom"
    )
    common.add_argument("--epochs", type=int, help="Training epochs (overrides train.epochs)")
    common.add_argument("--out", help="Output directory (default: timestamped under output.dir)")
    common.add_argument("--verbose", "-v", action="store_true", help="Verbose logging")
    return common


def _add_data_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="JSON-lines dataset")
    parser.add_argument("--eval-data", help="Separate JSON-lines eval split")
    parser.add_argument("--task", help="Task id from the config's task list")
    parser.add_argument("--schema", choices=[s.value for s in RecordSchema], help="Record layout")
    parser.add_argument("--label-map", help='Label mapping, e.g. "pos=1,neg=0" or a JSON object')
    parser.add_argument("--metric", choices=[m.value for m in MetricKind], help="Evaluation metric")


def _add_estimator_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=[m.value for m in EstimatorMode], help="Fisher estimator")
    parser.add_argument("--normalized", action="store_true", help="Divide scores by sqrt(group size)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fim", description="Fisher-information layer ranking and surgical fine-tuning"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()

    score = sub.add_parser("score", parents=[common], help="Score and rank layers on a probe")
    score.add_argument("--model", help="Model config JSON or snapshot manifest")
    _add_data_args(score)
    _add_estimator_args(score)
    score.set_defaults(handler=cmd_score)

    rank = sub.add_parser("rank", parents=[common], help="Print the ranking stored in a score file")
    rank.add_argument("--scores", required=True, help="Score file written by `fim score`")
    rank.set_defaults(handler=cmd_rank)

    tune = sub.add_parser("finetune", parents=[common], help="Run one surgical fine-tuning trial")
    tune.add_argument("--model", help="Model config JSON or snapshot manifest")
    tune.add_argument("--full", action="store_true", help="Train every group (full fine-tuning)")
    _add_data_args(tune)
    tune.set_defaults(handler=cmd_finetune)

    sweep = sub.add_parser("sweep", parents=[common], help="Run the baseline sweep over configured tasks")
    sweep.add_argument("--only", help="Comma-separated variants, e.g. top-1,full")
    sweep.set_defaults(handler=cmd_sweep)

    stability = sub.add_parser("stability", parents=[common], help="Track rankings across checkpoints")
    stability.add_argument("--checkpoints", required=True, help="Directory of ckpt_epoch{N} files")
    _add_data_args(stability)
    _add_estimator_args(stability)
    stability.set_defaults(handler=cmd_stability)

    report = sub.add_parser("report", parents=[common], help="Re-render a sweep_report.json")
    report.add_argument("--report", required=True, help="sweep_report.json written by `fim sweep`")
    report.add_argument("--only", help="Comma-separated variants, e.g. top-1,full")
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (
        ConfigurationError,
        InputError,
        SnapshotError,
        RefusalError,
        FileNotFoundError,
        json.JSONDecodeError,
    ) as e:
        print(f"fim {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FisherSurgeryError as e:
        logger.error(f"✗ fim {args.command} failed: {e}")
        print(f"fim {args.command}: error: {e}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
