import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import torch

from ..models.data_classes import LayerPartition
from ..surgery.mask import FreezeMask, MaskProvenance, SelectionEnd, variant_label
from ..utils.errors import InputError
from ..utils.io import sha256_json
from .estimator import EstimatorMode, FimDiagonal

logger = logging.getLogger(__name__)

TIE_POLICY = "descending score, ties to lower layer index"


@dataclass(frozen=True)
class LayerScoreVector:
    """Frobenius score per ranked group, in depth order."""
    scores: Tuple[float, ...]
    group_names: Tuple[str, ...]
    normalized: bool = False
    probe_size: int = 0
    probe_seed: Optional[int] = None
    estimator_mode: str = EstimatorMode.exact.value
    probe_digest: Optional[str] = None

    def __post_init__(self):
        if len(self.scores) != len(self.group_names):
            raise InputError(
                f"{len(self.scores)} scores for {len(self.group_names)} ranked groups"
            )
        if any(s < 0 for s in self.scores):
            raise InputError("layer scores must be nonnegative")

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.group_names, self.scores))


@dataclass(frozen=True)
class LayerRanking:
    """Ranked-group indices ordered from most to least important."""
    order: Tuple[int, ...]
    group_names: Tuple[str, ...]
    scores: Tuple[float, ...] = field(default=())
    tie_policy: str = TIE_POLICY

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.group_names))):
            raise InputError(f"ranking {list(self.order)} is not a permutation")

    @property
    def num_layers(self) -> int:
        return len(self.order)

    @property
    def positions(self) -> List[int]:
        """positions[i] is the 0-based rank of layer i."""
        pos = [0] * len(self.order)
        for rank, layer in enumerate(self.order):
            pos[layer] = rank
        return pos

    @property
    def ordered_names(self) -> List[str]:
        return [self.group_names[i] for i in self.order]

    def digest(self) -> str:
        return sha256_json({"order": list(self.order), "groups": list(self.group_names)})


def aggregate_layer_scores(
    fim: FimDiagonal,
    partition: LayerPartition,
    normalized: bool = False,
    probe_seed: Optional[int] = None,
) -> LayerScoreVector:
    """Score each ranked group by the L2 norm of its slice of the Fisher diagonal."""
    expected = {name for group in partition.groups for name in group.parameter_names}
    if set(fim.values) != expected:
        missing = sorted(expected - set(fim.values))
        extra = sorted(set(fim.values) - expected)
        raise InputError(
            f"Fisher diagonal does not match the partition (missing={missing}, extra={extra})"
        )

    scores = []
    for group in partition.ranked_groups:
        if not group.parameter_names:
            scores.append(0.0)
            continue
        flat = torch.cat([fim.values[name].reshape(-1) for name in group.parameter_names])
        score = float(torch.linalg.vector_norm(flat))
        if normalized:
            score /= flat.numel() ** 0.5
        scores.append(score)

    return LayerScoreVector(
        scores=tuple(scores),
        group_names=partition.ranked_names,
        normalized=normalized,
        probe_size=fim.probe_size,
        probe_seed=fim.seed if probe_seed is None else probe_seed,
        estimator_mode=EstimatorMode(fim.estimator_mode).value,
        probe_digest=fim.probe_digest,
    )


def rank_layers(scores: LayerScoreVector) -> LayerRanking:
    order = sorted(range(len(scores.scores)), key=lambda i: (-scores.scores[i], i))
    return LayerRanking(
        order=tuple(order), group_names=scores.group_names, scores=scores.scores
    )


def select_layers(
    ranking: LayerRanking, k: int, end: Union[SelectionEnd, str] = SelectionEnd.top
) -> FreezeMask:
    """Trainable mask for the first (top) or last (bottom) k ranked layers plus the head."""
    end = SelectionEnd(end)
    n = ranking.num_layers
    if not 1 <= k <= n:
        raise InputError(f"k must be in [1, {n}], got {k}")
    picked = ranking.order[:k] if end == SelectionEnd.top else ranking.order[n - k:]
    selected = [ranking.group_names[i] for i in picked]
    logger.debug(f"Selected {end.value}-{k}: {selected}")
    return FreezeMask.from_selection(
        ranking.group_names,
        selected,
        MaskProvenance(
            variant=variant_label(k, end),
            ranking_digest=ranking.digest(),
            k=k,
            end=end.value,
        ),
    )
