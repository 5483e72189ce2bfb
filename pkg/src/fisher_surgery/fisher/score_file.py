import logging
from pathlib import Path
from typing import Any, Dict, Optional

from ..utils.errors import InputError
from ..utils.io import load_json, save_json, utc_timestamp_iso
from .ranking import TIE_POLICY, LayerRanking, LayerScoreVector

logger = logging.getLogger(__name__)

REQUIRED_KEYS = (
    "model_digest",
    "probe_seed",
    "probe_size",
    "estimator_mode",
    "normalized",
    "scores",
    "ranking",
)


def score_payload(
    scores: LayerScoreVector,
    ranking: LayerRanking,
    model_digest: str,
    run_config: Optional[Dict[str, Any]] = None,
    input_digests: Optional[Dict[str, str]] = None,
) -> Dict[str, Any]:
    return {
        "model_digest": model_digest,
        "probe_seed": scores.probe_seed,
        "probe_size": scores.probe_size,
        "probe_digest": scores.probe_digest,
        "estimator_mode": scores.estimator_mode,
        "normalized": scores.normalized,
        "group_names": list(scores.group_names),
        "scores": scores.as_dict(),
        "ranking": list(ranking.order),
        "ranking_names": ranking.ordered_names,
        "tie_policy": ranking.tie_policy,
        "run_config": run_config or {},
        "input_digests": input_digests or {},
    }


def write_score_file(
    path: Path,
    scores: LayerScoreVector,
    ranking: LayerRanking,
    model_digest: str,
    run_config: Optional[Dict[str, Any]] = None,
    input_digests: Optional[Dict[str, str]] = None,
) -> Path:
    """Write the score file; `timestamp` is the only field that differs between identical runs."""
    payload = score_payload(scores, ranking, model_digest, run_config, input_digests)
    payload["timestamp"] = utc_timestamp_iso()
    out = save_json(payload, path, include_timestamp=False)
    logger.info(f"Wrote score file {out}")
    return out


def read_score_file(path: Path) -> tuple[LayerScoreVector, LayerRanking, Dict[str, Any]]:
    data = load_json(path)
    missing = [key for key in REQUIRED_KEYS if key not in data]
    if missing:
        raise InputError(f"{path} is not a score file (missing keys: {missing})")
    names = tuple(data.get("group_names") or data["scores"].keys())
    scores = LayerScoreVector(
        scores=tuple(float(data["scores"][name]) for name in names),
        group_names=names,
        normalized=bool(data["normalized"]),
        probe_size=int(data["probe_size"]),
        probe_seed=data["probe_seed"],
        estimator_mode=data["estimator_mode"],
        probe_digest=data.get("probe_digest"),
    )
    ranking = LayerRanking(
        order=tuple(int(i) for i in data["ranking"]),
        group_names=names,
        scores=scores.scores,
        tie_policy=data.get("tie_policy", TIE_POLICY),
    )
    return scores, ranking, data
