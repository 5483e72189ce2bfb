import logging
import math
import re
from abc import ABC, abstractmethod
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn

from ..utils.errors import ConfigurationError, InputError
from ..utils.io import sha256_json
from .config import ModelConfig
from .data_classes import (
    HEAD_GROUP,
    PREAMBLE_GROUP,
    Example,
    LayerGroup,
    LayerPartition,
    TaskKind,
    ranked_group_name,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
_LAYER_PREFIX = re.compile(r"^layers\.(\d+)\.")


class LayeredClassifier(nn.Module, ABC):
    """
    Base class for the differentiable classifiers every other module consumes.
    - Parameters live under three attributes: `preamble`, `layers` (ModuleList,
      depth order) and `head`; the LayerPartition is derived from those prefixes
    - `forward` maps an encoded batch to logits (classification) or means
      (regression), shape (N, output_dim)
    """

    output_bias = "head.bias"

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self._partition: Optional[LayerPartition] = None

    # ---- Identity ----
    @property
    def task_kind(self) -> TaskKind:
        return self.config.task_kind

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def partition(self) -> LayerPartition:
        if self._partition is None:
            self._partition = self._build_partition()
        return self._partition

    def _build_partition(self) -> LayerPartition:
        preamble: List[str] = []
        head: List[str] = []
        ranked: List[List[str]] = [[] for _ in range(len(self.layers))]
        for name, _ in self.named_parameters():
            match = _LAYER_PREFIX.match(name)
            if name.startswith("preamble."):
                preamble.append(name)
            elif name.startswith("head."):
                head.append(name)
            elif match:
                ranked[int(match.group(1))].append(name)
            else:
                raise ConfigurationError(f"parameter {name} belongs to no layer group")
        partition = LayerPartition(
            ranked_groups=tuple(
                LayerGroup(ranked_group_name(i), tuple(names)) for i, names in enumerate(ranked)
            ),
            preamble_group=LayerGroup(PREAMBLE_GROUP, tuple(preamble)),
            head_group=LayerGroup(HEAD_GROUP, tuple(head)),
        )
        partition.validate([name for name, _ in self.named_parameters()])
        return partition

    def parameter_count(self, group: Optional[str] = None) -> int:
        params = dict(self.named_parameters())
        names = params if group is None else self.partition.group(group).parameter_names
        return sum(params[name].numel() for name in names)

    def architecture_digest(self) -> str:
        return sha256_json({
            "kind": self.config.kind.value,
            "parameters": [[name, list(p.shape)] for name, p in self.named_parameters()],
        })

    # ---- Inputs ----
    @abstractmethod
    def encode(self, examples: Sequence[Example]) -> torch.Tensor:
        """Validate and collate examples into the tensor `forward` expects."""

    @abstractmethod
    def planted_input(self, layer_index: int) -> List[str]:
        """Input-side projection parameters of a ranked layer."""

    @abstractmethod
    def planted_output(self, layer_index: int) -> List[str]:
        """Output projection weights of a ranked layer, initialized at `residual_scale`."""

    def check_label(self, example: Example) -> None:
        if self.task_kind == TaskKind.classification:
            label = example.label
            if isinstance(label, bool) or not isinstance(label, int) or not 0 <= label < self.num_classes:
                raise InputError(
                    f"label {label!r} is not a class index in [0, {self.num_classes})"
                )
        elif not math.isfinite(float(example.label)):
            raise InputError(f"regression label {example.label!r} is not finite")

    def encode_labels(self, examples: Sequence[Example]) -> torch.Tensor:
        for example in examples:
            self.check_label(example)
        if self.task_kind == TaskKind.classification:
            return torch.tensor([ex.label for ex in examples], dtype=torch.long)
        return torch.tensor([float(ex.label) for ex in examples], dtype=DTYPE)


@contextmanager
def parameters_require_grad(model: nn.Module) -> Iterator[None]:
    """Temporarily mark every parameter trainable so gradients can be taken."""
    previous = {name: p.requires_grad for name, p in model.named_parameters()}
    try:
        for p in model.parameters():
            p.requires_grad_(True)
        yield
    finally:
        for name, p in model.named_parameters():
            p.requires_grad_(previous[name])


def log_prob(model: LayeredClassifier, example: Example) -> torch.Tensor:
    """
    Classification: per-class log-probabilities, shape (C,).
    Regression: (mean, variance) of the unit-variance Gaussian p(y|x), shape (2,).
    """
    inputs = model.encode([example])
    with torch.no_grad():
        outputs = model(inputs)[0]
    if model.task_kind == TaskKind.classification:
        return F.log_softmax(outputs, dim=-1)
    return torch.stack([outputs[0], torch.ones((), dtype=outputs.dtype)])


def gaussian_log_density(mean: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -0.5 * (target - mean) ** 2 - 0.5 * math.log(2.0 * math.pi)


def _resolve_target(
    model: LayeredClassifier, example: Example, target: Optional[Union[int, float]]
) -> Union[int, float]:
    if model.task_kind == TaskKind.classification:
        if isinstance(target, bool) or not isinstance(target, int):
            raise InputError(f"class index must be an integer, got {target!r}")
        if not 0 <= target < model.num_classes:
            raise InputError(f"class index {target} outside [0, {model.num_classes})")
        return target
    value = float(example.label if target is None else target)
    if not math.isfinite(value):
        raise InputError(f"regression target {value!r} is not finite")
    return value


def grad_log_prob(
    model: LayeredClassifier,
    example: Example,
    class_index: Optional[Union[int, float]] = None,
) -> Dict[str, torch.Tensor]:
    """
    Gradient of log p(y | x) with respect to every parameter, keyed like
    `named_parameters()`. For regression `class_index` is the response value y
    (defaults to the example label), giving (y - mean) * d(mean).
    """
    target = _resolve_target(model, example, class_index)
    names = [name for name, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    inputs = model.encode([example])
    with parameters_require_grad(model), torch.enable_grad():
        outputs = model(inputs)[0]
        if model.task_kind == TaskKind.classification:
            value = F.log_softmax(outputs, dim=-1)[target]
        else:
            value = gaussian_log_density(outputs[0], torch.tensor(target, dtype=outputs.dtype))
        grads = torch.autograd.grad(value, params, allow_unused=True)
    return {
        name: (g.detach() if g is not None else torch.zeros_like(p))
        for name, p, g in zip(names, params, grads)
    }


def predict(
    model: LayeredClassifier, examples: Sequence[Example], batch_size: int = 16
) -> List[Union[int, float]]:
    """Argmax class (classification) or predicted mean (regression)."""
    predictions: List[Union[int, float]] = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            outputs = model(model.encode(examples[start:start + batch_size]))
            if model.task_kind == TaskKind.classification:
                predictions.extend(int(i) for i in outputs.argmax(dim=-1).tolist())
            else:
                predictions.extend(float(v) for v in outputs[:, 0].tolist())
    model.train(was_training)
    return predictions
