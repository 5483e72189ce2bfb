import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from ..models.data_classes import Example
from ..utils.errors import InputError
from ..utils.io import sha256_json

logger = logging.getLogger(__name__)

DEFAULT_PROBE_SIZE = 100


def examples_digest(examples: Sequence[Example]) -> str:
    return sha256_json([[list(ex.inputs), ex.label] for ex in examples])


@dataclass(frozen=True)
class Probe:
    """The seeded evaluation subset used to estimate the Fisher diagonal."""
    examples: Tuple[Example, ...]
    seed: int
    requested_size: int
    digest: str

    @property
    def size(self) -> int:
        return len(self.examples)

    @property
    def clamped(self) -> bool:
        return self.size < self.requested_size


def draw_probe(
    examples: Sequence[Example], size: int = DEFAULT_PROBE_SIZE, seed: int = 0
) -> Probe:
    """Uniform sample without replacement; uses every example when there are fewer than `size`."""
    if size < 1:
        raise InputError(f"probe size must be positive, got {size}")
    if not examples:
        raise InputError("cannot draw a probe from an empty split")

    if len(examples) <= size:
        if len(examples) < size:
            logger.warning(
                f"Probe size {size} exceeds the {len(examples)} available examples; using all"
            )
        chosen = list(examples)
    else:
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(len(examples), size=size, replace=False))
        chosen = [examples[int(i)] for i in indices]

    return Probe(
        examples=tuple(chosen),
        seed=seed,
        requested_size=size,
        digest=examples_digest(chosen),
    )
