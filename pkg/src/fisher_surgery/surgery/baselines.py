import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from ..bench.metrics import MetricKind
from ..fisher.estimator import estimate_fim_diagonal
from ..fisher.probe import Probe
from ..fisher.ranking import (
    LayerRanking,
    LayerScoreVector,
    aggregate_layer_scores,
    rank_layers,
    select_layers,
)
from ..models.base import LayeredClassifier
from ..models.data_classes import DataSplits
from ..storage.snapshot import restore, snapshot
from ..utils.errors import InputError
from .config import TrainConfig
from .engine import TrialResult, finetune
from .mask import FULL_VARIANT, FreezeMask, SelectionEnd, variant_label

logger = logging.getLogger(__name__)

# (k, end) per row; None is the full fine-tuning baseline
BASELINE_VARIANTS: Tuple[Tuple[str, Optional[int], Optional[SelectionEnd]], ...] = (
    (FULL_VARIANT, None, None),
    *((variant_label(k, SelectionEnd.top), k, SelectionEnd.top) for k in range(1, 6)),
    (variant_label(1, SelectionEnd.bottom), 1, SelectionEnd.bottom),
)
VARIANT_NAMES = tuple(name for name, _, _ in BASELINE_VARIANTS)


def parse_only(only: Optional[Sequence[str]]) -> Tuple[str, ...]:
    """Validate a variant filter such as ["top-1", "full"]; keeps the canonical row order."""
    if not only:
        return VARIANT_NAMES
    requested = {name.strip().lower() for name in only if name.strip()}
    unknown = sorted(requested - set(VARIANT_NAMES))
    if unknown:
        raise InputError(f"unknown variants {unknown}; choose from {list(VARIANT_NAMES)}")
    return tuple(name for name in VARIANT_NAMES if name in requested)


def epoch0_ranking(
    model: LayeredClassifier,
    probe: Probe,
    mode: str = "exact",
    normalized: bool = False,
    num_samples: int = 1,
) -> Tuple[LayerScoreVector, LayerRanking]:
    """Score and rank the untouched model; the ranking is reused by every trial."""
    fim = estimate_fim_diagonal(model, probe, mode=mode, seed=probe.seed, num_samples=num_samples)
    scores = aggregate_layer_scores(fim, model.partition, normalized=normalized)
    return scores, rank_layers(scores)


def run_baselines(
    model_factory: Callable[[], LayeredClassifier],
    data: DataSplits,
    config: TrainConfig,
    *,
    ranking: Optional[LayerRanking] = None,
    probe: Optional[Probe] = None,
    metric: MetricKind = MetricKind.accuracy,
    task_id: str = "task",
    only: Optional[Sequence[str]] = None,
    checkpoint_root: Optional[Path] = None,
) -> List[TrialResult]:
    """
    Full model, top-1..top-5 and bottom-1 trials from one shared initial
    snapshot. The ranking is computed once at epoch 0 (or passed in) and
    reused for every row.
    """
    variants = parse_only(only)
    model = model_factory()
    partition = model.partition
    initial = snapshot(model, epoch=0)
    num_layers = partition.num_layers
    if ranking is None:
        if probe is None:
            raise InputError("run_baselines needs either a ranking or a probe")
        _, ranking = epoch0_ranking(model, probe)

    results: List[TrialResult] = []
    for name, k, end in BASELINE_VARIANTS:
        if name not in variants:
            continue
        warnings: List[str] = []
        if k is None:
            mask = FreezeMask.full(partition.group_names)
        else:
            effective = k
            if k > num_layers:
                effective = num_layers
                message = f"{name}: k={k} exceeds {num_layers} ranked layers, clamped to {effective}"
                logger.warning(message)
                warnings.append(message)
            mask = select_layers(ranking, effective, end)

        restore(model, initial)
        checkpoint_dir = Path(checkpoint_root) / name if checkpoint_root else None
        result = finetune(
            model,
            mask,
            data,
            config,
            metric=metric,
            checkpoint_dir=checkpoint_dir,
            task_id=task_id,
            warnings=warnings,
            variant=name,
        )
        results.append(result)
    return results
