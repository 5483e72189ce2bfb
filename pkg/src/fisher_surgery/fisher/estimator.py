import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Sequence, Union

import torch
import torch.nn.functional as F
from torch.func import functional_call, grad, jacrev

from ..models.base import LayeredClassifier
from ..models.data_classes import Example, TaskKind
from ..utils.errors import InputError, NumericError
from .probe import Probe, examples_digest

logger = logging.getLogger(__name__)

ParamDict = Dict[str, torch.Tensor]


class EstimatorMode(str, Enum):
    exact = "exact"          # expectation over y ~ p(y|x) summed over every class
    sampled = "sampled"      # y drawn from p(y|x)
    empirical = "empirical"  # observed labels instead of model samples


@dataclass(frozen=True)
class FimDiagonal:
    """Per-parameter estimate of diag(F), keyed like `named_parameters()`."""
    values: ParamDict
    probe_size: int
    estimator_mode: EstimatorMode
    seed: int
    probe_digest: str
    num_samples: int = 1

    def __post_init__(self):
        for name, tensor in self.values.items():
            if bool((tensor < 0).any()):
                raise NumericError(f"negative Fisher diagonal entry in {name}")


def _as_examples(probe: Union[Probe, Sequence[Example]]) -> tuple[Sequence[Example], str]:
    if isinstance(probe, Probe):
        return probe.examples, probe.digest
    return list(probe), examples_digest(list(probe))


def _output_fn(model: LayeredClassifier, inputs: torch.Tensor) -> Callable[[ParamDict], torch.Tensor]:
    def outputs(params: ParamDict) -> torch.Tensor:
        return functional_call(model, params, (inputs,))[0]

    return outputs


def _classification_contribution(
    model: LayeredClassifier,
    params: ParamDict,
    example: Example,
    mode: EstimatorMode,
    generator: torch.Generator,
    num_samples: int,
) -> ParamDict:
    outputs = _output_fn(model, model.encode([example]))

    def log_probs(p: ParamDict) -> torch.Tensor:
        return F.log_softmax(outputs(p), dim=-1)

    with torch.no_grad():
        probs = log_probs(params).exp()

    if mode == EstimatorMode.exact:
        # one Jacobian row per class, weighted by the model's own probabilities
        jac = jacrev(log_probs)(params)
        return {name: torch.tensordot(probs, j ** 2, dims=1) for name, j in jac.items()}

    if mode == EstimatorMode.empirical:
        weights = {int(example.label): 1.0}
    else:
        draws = torch.multinomial(probs, num_samples, replacement=True, generator=generator)
        counts = torch.bincount(draws, minlength=probs.shape[0])
        weights = {c: counts[c].item() / num_samples for c in range(probs.shape[0]) if counts[c] > 0}

    contribution = {name: torch.zeros_like(p) for name, p in params.items()}
    for c, weight in weights.items():
        g = grad(lambda p, c=c: log_probs(p)[c])(params)
        for name in contribution:
            contribution[name] += weight * g[name] ** 2
    return contribution


def _regression_contribution(
    model: LayeredClassifier,
    params: ParamDict,
    example: Example,
    mode: EstimatorMode,
    generator: torch.Generator,
    num_samples: int,
) -> ParamDict:
    outputs = _output_fn(model, model.encode([example]))
    g = grad(lambda p: outputs(p)[0])(params)

    # E[(y - mean)^2] under the unit-variance Gaussian is exactly 1
    if mode == EstimatorMode.exact:
        scale = 1.0
    elif mode == EstimatorMode.sampled:
        noise = torch.randn(num_samples, generator=generator, dtype=torch.float64)
        scale = float((noise ** 2).mean())
    else:
        with torch.no_grad():
            mean = outputs(params)[0]
        residual = torch.tensor(float(example.label), dtype=mean.dtype) - mean
        # d/dmean of the log density is the residual
        scale = float(residual ** 2)
    return {name: scale * t ** 2 for name, t in g.items()}


def estimate_fim_diagonal(
    model: LayeredClassifier,
    probe: Union[Probe, Sequence[Example]],
    mode: Union[EstimatorMode, str] = EstimatorMode.exact,
    seed: int = 0,
    num_samples: int = 1,
) -> FimDiagonal:
    """
    (1/N) sum over the probe of E_y[(d log p(y|x) / d theta)^2], elementwise.
    Contributions are reduced in probe order, so results do not depend on how
    the work is scheduled.
    """
    mode = EstimatorMode(mode)
    examples, digest = _as_examples(probe)
    if not examples:
        raise InputError("probe must contain at least one example")
    if num_samples < 1:
        raise InputError(f"num_samples must be positive, got {num_samples}")

    partition = model.partition
    params = {name: p.detach() for name, p in model.named_parameters()}
    total = {name: torch.zeros_like(p) for name, p in params.items()}
    generator = torch.Generator().manual_seed(seed)
    contribute = (
        _classification_contribution
        if model.task_kind == TaskKind.classification
        else _regression_contribution
    )

    was_training = model.training
    model.eval()
    try:
        for index, example in enumerate(examples):
            model.check_label(example)
            contribution = contribute(model, params, example, mode, generator, num_samples)
            for name, value in contribution.items():
                if not bool(torch.isfinite(value).all()):
                    raise NumericError(
                        f"non-finite gradient for {name} on probe example {index}",
                        group=partition.group_of(name),
                    )
                total[name] += value
    finally:
        model.train(was_training)

    n = len(examples)
    logger.debug(f"Estimated Fisher diagonal ({mode.value}) over {n} probe examples")
    return FimDiagonal(
        values={name: t / n for name, t in total.items()},
        probe_size=n,
        estimator_mode=mode,
        seed=seed,
        probe_digest=digest,
        num_samples=num_samples if mode == EstimatorMode.sampled else 1,
    )
