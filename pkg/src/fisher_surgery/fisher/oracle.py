import logging
from typing import Dict, Sequence, Union

import torch

from ..models.base import LayeredClassifier, grad_log_prob, log_prob
from ..models.data_classes import Example, TaskKind
from ..utils.errors import InputError, RefusalError
from .estimator import EstimatorMode, FimDiagonal
from .probe import Probe, examples_digest

logger = logging.getLogger(__name__)

MAX_ORACLE_CLASSES = 16
MAX_ORACLE_PARAMETERS = 100_000


def brute_force_fim_oracle(
    model: LayeredClassifier, probe: Union[Probe, Sequence[Example]]
) -> FimDiagonal:
    """
    Exact-expectation Fisher diagonal computed the slow way: one
    `grad_log_prob` call per (example, class), squared and weighted by p(c|x).
    Used to check `estimate_fim_diagonal` on small classification models.
    """
    if model.task_kind != TaskKind.classification:
        raise RefusalError("the Fisher oracle only handles classification models")
    if model.num_classes > MAX_ORACLE_CLASSES:
        raise RefusalError(
            f"{model.num_classes} classes exceeds the oracle limit of {MAX_ORACLE_CLASSES}"
        )
    total_params = model.parameter_count()
    if total_params > MAX_ORACLE_PARAMETERS:
        raise RefusalError(
            f"{total_params} parameters exceeds the oracle limit of {MAX_ORACLE_PARAMETERS}"
        )

    if isinstance(probe, Probe):
        examples, digest = list(probe.examples), probe.digest
    else:
        examples = list(probe)
        digest = examples_digest(examples)
    if not examples:
        raise InputError("probe must contain at least one example")

    sums: Dict[str, torch.Tensor] = {
        name: torch.zeros_like(p, dtype=p.dtype) for name, p in model.named_parameters()
    }
    for example in examples:
        probs = log_prob(model, example).exp()
        for c in range(model.num_classes):
            g = grad_log_prob(model, example, c)
            weight = float(probs[c])
            for name in sums:
                sums[name] = sums[name] + weight * g[name] * g[name]

    n = len(examples)
    logger.debug(f"Oracle Fisher diagonal over {n} examples x {model.num_classes} classes")
    return FimDiagonal(
        values={name: s / n for name, s in sums.items()},
        probe_size=n,
        estimator_mode=EstimatorMode.exact,
        seed=0,
        probe_digest=digest,
    )
