import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from scipy import stats

from ..fisher.estimator import EstimatorMode, estimate_fim_diagonal
from ..fisher.probe import Probe
from ..fisher.ranking import LayerRanking, LayerScoreVector, aggregate_layer_scores, rank_layers
from ..models.base import LayeredClassifier
from ..storage.snapshot import ParameterSnapshot, restore
from ..utils.errors import InputError, SnapshotError
from ..utils.io import ensure_dir, save_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajectoryPoint:
    epoch: int
    scores: LayerScoreVector
    ranking: LayerRanking
    checkpoint_digest: str = ""


@dataclass
class RankTrajectory:
    """Layer rankings recomputed at each checkpoint, in epoch order."""
    points: List[TrajectoryPoint]
    reference_epoch: int = 0
    probe_digest: Optional[str] = None

    def __post_init__(self):
        epochs = self.epochs
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise InputError(f"trajectory epochs must be strictly increasing, got {epochs}")
        sizes = {p.ranking.num_layers for p in self.points}
        if len(sizes) > 1:
            raise InputError(f"rankings cover different layer counts: {sorted(sizes)}")

    @property
    def epochs(self) -> List[int]:
        return [p.epoch for p in self.points]

    @property
    def group_names(self) -> Tuple[str, ...]:
        return self.points[0].ranking.group_names if self.points else ()

    def reference(self) -> TrajectoryPoint:
        for point in self.points:
            if point.epoch == self.reference_epoch:
                return point
        # no checkpoint at the reference epoch: fall back to the earliest one
        return self.points[0]


@dataclass
class DeviationReport:
    reference_epoch: int
    epochs: List[int]
    displacement: List[float]
    kendall_tau: List[float]
    per_layer_displacement: Dict[str, List[int]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "reference_epoch": self.reference_epoch,
            "epochs": list(self.epochs),
            "displacement": list(self.displacement),
            "kendall_tau": list(self.kendall_tau),
            "per_layer_displacement": {k: list(v) for k, v in self.per_layer_displacement.items()},
        }


def kendall_tau(order: Sequence[int], reference_order: Sequence[int]) -> float:
    """Kendall tau between two rankings of the same layers, given best-first."""
    n = len(order)
    if n != len(reference_order):
        raise InputError("rankings must cover the same number of layers")
    if n < 2:
        return 1.0
    return float(stats.kendalltau(_positions(order), _positions(reference_order)).statistic)


def _positions(order: Sequence[int]) -> List[int]:
    positions = [0] * len(order)
    for rank, layer in enumerate(order):
        positions[layer] = rank
    return positions


def mean_displacement(ranking: LayerRanking, reference: LayerRanking) -> float:
    current, ref = ranking.positions, reference.positions
    return sum(abs(a - b) for a, b in zip(current, ref)) / len(ref)


def _score_checkpoint(
    snap: ParameterSnapshot,
    epoch: int,
    model_factory: Callable[[], LayeredClassifier],
    probe: Probe,
    mode: EstimatorMode,
    normalized: bool,
    seed: int,
    num_samples: int,
) -> TrajectoryPoint:
    model = model_factory()
    expected = model.architecture_digest()
    if snap.architecture_digest != expected:
        raise SnapshotError(
            f"checkpoint at epoch {epoch} has architecture {snap.architecture_digest}, "
            f"model factory builds {expected}"
        )
    restore(model, snap)
    fim = estimate_fim_diagonal(model, probe, mode=mode, seed=seed, num_samples=num_samples)
    scores = aggregate_layer_scores(fim, model.partition, normalized=normalized)
    ranking = rank_layers(scores)
    logger.debug(f"epoch {epoch}: ranking {ranking.ordered_names}")
    return TrajectoryPoint(epoch=epoch, scores=scores, ranking=ranking, checkpoint_digest=snap.digest)


def track(
    checkpoints: Sequence[ParameterSnapshot],
    model_factory: Callable[[], LayeredClassifier],
    probe: Probe,
    mode: EstimatorMode = EstimatorMode.exact,
    normalized: bool = False,
    seed: Optional[int] = None,
    num_samples: int = 1,
    epochs: Optional[Sequence[int]] = None,
    reference_epoch: int = 0,
    workers: int = 1,
) -> RankTrajectory:
    """
    Restore each checkpoint into a fresh model and rank its layers on the same
    probe. Epoch tags come from `epochs` or from the snapshots themselves.
    """
    if len(checkpoints) < 2:
        raise InputError(f"tracking needs at least 2 checkpoints, got {len(checkpoints)}")
    if epochs is None:
        epochs = [snap.epoch for snap in checkpoints]
        if any(e is None for e in epochs):
            raise InputError("checkpoints carry no epoch tags; pass epochs explicitly")
    elif len(epochs) != len(checkpoints):
        raise InputError(f"{len(epochs)} epoch tags for {len(checkpoints)} checkpoints")

    mode = EstimatorMode(mode)
    seed = probe.seed if seed is None else seed
    jobs = sorted(zip(epochs, range(len(checkpoints))), key=lambda item: item[0])

    def run(job: Tuple[int, int]) -> TrajectoryPoint:
        epoch, index = job
        return _score_checkpoint(
            checkpoints[index], epoch, model_factory, probe, mode, normalized, seed, num_samples
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(run, jobs))
    else:
        points = [run(job) for job in jobs]

    logger.info(f"Tracked layer rankings at epochs {[p.epoch for p in points]}")
    return RankTrajectory(points=points, reference_epoch=reference_epoch, probe_digest=probe.digest)


def deviation(trajectory: RankTrajectory) -> DeviationReport:
    if not trajectory.points:
        raise InputError("cannot compute deviation of an empty trajectory")
    reference = trajectory.reference().ranking
    names = trajectory.group_names
    per_layer: Dict[str, List[int]] = {name: [] for name in names}
    displacement, taus = [], []
    for point in trajectory.points:
        displacement.append(mean_displacement(point.ranking, reference))
        taus.append(kendall_tau(point.ranking.order, reference.order))
        for name, now, ref in zip(names, point.ranking.positions, reference.positions):
            per_layer[name].append(abs(now - ref))
    return DeviationReport(
        reference_epoch=trajectory.reference().epoch,
        epochs=trajectory.epochs,
        displacement=displacement,
        kendall_tau=taus,
        per_layer_displacement=per_layer,
    )


def rank_plot_frame(trajectory: RankTrajectory) -> pd.DataFrame:
    """One row per (epoch, layer) with the layer's 1-based rank."""
    rows = [
        {"epoch": point.epoch, "layer": layer, "rank": position + 1}
        for point in trajectory.points
        for layer, position in enumerate(point.ranking.positions)
    ]
    return pd.DataFrame(rows, columns=["epoch", "layer", "rank"])


def write_trajectory(
    out_dir: Path,
    trajectory: RankTrajectory,
    report: DeviationReport,
    run_config: Optional[Dict[str, Any]] = None,
    input_digests: Optional[Dict[str, str]] = None,
) -> Dict[str, Path]:
    out_dir = ensure_dir(Path(out_dir))
    payload = {
        "reference_epoch": report.reference_epoch,
        "probe_digest": trajectory.probe_digest,
        "group_names": list(trajectory.group_names),
        "epochs": [
            {
                "epoch": p.epoch,
                "checkpoint_digest": p.checkpoint_digest,
                "scores": p.scores.as_dict(),
                "ranking": list(p.ranking.order),
                "estimator_mode": p.scores.estimator_mode,
                "normalized": p.scores.normalized,
            }
            for p in trajectory.points
        ],
        "deviation": report.to_dict(),
        "run_config": run_config or {},
        "input_digests": input_digests or {},
    }
    json_path = save_json(payload, out_dir / "trajectory.json")
    csv_path = out_dir / "rank_plot.csv"
    rank_plot_frame(trajectory).to_csv(csv_path, index=False)
    logger.info(f"Wrote {json_path} and {csv_path}")
    return {"trajectory": json_path, "plot_data": csv_path}
