import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from ..bench.metrics import MetricKind, compute_metric, metric_range
from ..models.base import LayeredClassifier, predict
from ..models.data_classes import DataSplits, TaskKind
from ..storage.snapshot import ParameterSnapshot, save_snapshot, snapshot
from ..utils.errors import DegenerateMetricError, InputError, NumericError
from ..utils.io import save_json
from .config import TrainConfig
from .mask import FreezeMask

logger = logging.getLogger(__name__)

TRIAL_MANIFEST = "trial_manifest.json"


@dataclass
class TrialResult:
    """Outcome of one fine-tuning run under a freeze mask."""
    task_id: str
    variant: str
    metric: str
    final_metric: float
    mask: Dict[str, Any]
    train_loss: List[float] = field(default_factory=list)
    train_metric: List[float] = field(default_factory=list)
    eval_metric: List[float] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    checkpoint_digests: Dict[int, str] = field(default_factory=dict)
    initial_digest: str = ""
    final_digest: str = ""
    trainable_parameters: int = 0
    optimizer: str = "adamw"
    config: Dict[str, Any] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    checkpoints: Dict[int, ParameterSnapshot] = field(
        default_factory=dict, repr=False, compare=False
    )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("checkpoints")
        data["checkpoint_digests"] = {str(k): v for k, v in self.checkpoint_digests.items()}
        return data


def _offending_group(model: LayeredClassifier, use_grad: bool) -> Optional[str]:
    for name, p in model.named_parameters():
        tensor = p.grad if use_grad else p
        if tensor is not None and not bool(torch.isfinite(tensor).all()):
            return model.partition.group_of(name)
    return None


def _loss(model: LayeredClassifier, outputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if model.task_kind == TaskKind.classification:
        return F.cross_entropy(outputs, targets)
    # negative log-likelihood of the unit-variance Gaussian, up to a constant
    return 0.5 * F.mse_loss(outputs[:, 0], targets)


def _evaluate(
    model: LayeredClassifier, examples: Sequence, metric: MetricKind, batch_size: int, epoch: int
) -> float:
    predictions = predict(model, list(examples), batch_size=batch_size)
    try:
        value = compute_metric(metric, predictions, [ex.label for ex in examples])
    except DegenerateMetricError as e:
        logger.warning(f"epoch {epoch}: {metric.value} recorded as NaN, {e}")
        return float("nan")
    low, high = metric_range(metric)
    if not low - 1e-12 <= value <= high + 1e-12:
        raise NumericError(f"{metric.value} {value} outside [{low}, {high}]", epoch=epoch)
    return value


def finetune(
    model: LayeredClassifier,
    mask: FreezeMask,
    data: DataSplits,
    config: TrainConfig,
    metric: Union[MetricKind, str] = MetricKind.accuracy,
    checkpoint_dir: Optional[Path] = None,
    task_id: str = "task",
    warnings: Sequence[str] = (),
    variant: Optional[str] = None,
) -> TrialResult:
    """
    Train `model` in place with AdamW over the mask's trainable groups only.
    Frozen parameters are excluded from the optimizer, so neither gradients
    nor weight decay touch them. Snapshots are taken at every checkpoint
    epoch (epoch 0 is the state before any update).
    """
    metric = MetricKind(metric)
    if not data.train or not data.eval:
        raise InputError("finetune needs non-empty train and eval splits")
    partition = model.partition
    mask.check_partition(partition)

    previous_flags = {name: p.requires_grad for name, p in model.named_parameters()}
    trainable = mask.apply(model, partition)
    optimizer = torch.optim.AdamW(
        trainable, lr=config.learning_rate, weight_decay=config.weight_decay
    )
    generator = torch.Generator().manual_seed(config.seed)
    checkpoint_epochs = set(config.checkpoint_epochs or [])
    train_examples = list(data.train)

    result = TrialResult(
        task_id=task_id,
        variant=variant or mask.provenance.variant,
        metric=metric.value,
        final_metric=float("nan"),
        mask=mask.to_dict(),
        trainable_parameters=sum(p.numel() for p in trainable),
        optimizer=config.optimizer,
        config=config.model_dump(mode="json"),
        warnings=list(warnings),
    )

    def checkpoint(epoch: int) -> None:
        snap = snapshot(model, epoch=epoch)
        result.checkpoints[epoch] = snap
        result.checkpoint_digests[epoch] = snap.digest
        if checkpoint_dir is not None:
            save_snapshot(snap, Path(checkpoint_dir))

    logger.info(
        f"Fine-tuning {task_id} [{result.variant}]: {result.trainable_parameters} trainable "
        f"parameters in {mask.trainable_groups}"
    )
    started = time.perf_counter()
    try:
        initial = snapshot(model, epoch=0)
        result.initial_digest = initial.digest
        if 0 in checkpoint_epochs:
            checkpoint(0)

        for epoch in range(1, config.epochs + 1):
            model.train()
            order = torch.randperm(len(train_examples), generator=generator).tolist()
            losses = []
            for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
                batch = [train_examples[i] for i in order[start:start + config.batch_size]]
                inputs = model.encode(batch)
                targets = model.encode_labels(batch)

                optimizer.zero_grad(set_to_none=True)
                loss = _loss(model, model(inputs), targets)
                if not bool(torch.isfinite(loss)):
                    raise NumericError(
                        f"non-finite training loss {loss.item()}",
                        group=_offending_group(model, use_grad=False),
                        epoch=epoch,
                        batch=batch_index,
                    )
                loss.backward()
                bad_group = _offending_group(model, use_grad=True)
                if bad_group is not None:
                    raise NumericError(
                        "non-finite gradient", group=bad_group, epoch=epoch, batch=batch_index
                    )
                optimizer.step()
                losses.append(loss.item())

            result.train_loss.append(sum(losses) / len(losses))
            result.train_metric.append(
                _evaluate(model, train_examples, metric, config.eval_batch_size, epoch)
            )
            result.eval_metric.append(
                _evaluate(model, data.eval, metric, config.eval_batch_size, epoch)
            )
            logger.debug(
                f"epoch {epoch}: loss={result.train_loss[-1]:.6f} "
                f"eval {metric.value}={result.eval_metric[-1]:.4f}"
            )
            if epoch in checkpoint_epochs:
                checkpoint(epoch)
    finally:
        for name, p in model.named_parameters():
            p.requires_grad_(previous_flags[name])
        model.eval()

    result.wall_clock_seconds = time.perf_counter() - started
    result.final_metric = result.eval_metric[-1]
    result.final_digest = snapshot(model).digest

    if checkpoint_dir is not None:
        save_json(result.to_dict(), Path(checkpoint_dir) / TRIAL_MANIFEST)
    logger.info(f"✓ {task_id} [{result.variant}]: {metric.value}={result.final_metric:.4f}")
    return result
