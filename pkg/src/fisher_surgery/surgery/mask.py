import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence

from torch import nn

from ..models.data_classes import HEAD_GROUP, PREAMBLE_GROUP, LayerPartition
from ..utils.errors import InputError

logger = logging.getLogger(__name__)


class SelectionEnd(str, Enum):
    top = "top"
    bottom = "bottom"


FULL_VARIANT = "full"


def variant_label(k: int, end: SelectionEnd) -> str:
    return f"{SelectionEnd(end).value}-{k}"


@dataclass(frozen=True)
class MaskProvenance:
    variant: str
    ranking_digest: Optional[str] = None
    k: Optional[int] = None
    end: Optional[str] = None


@dataclass(frozen=True)
class FreezeMask:
    """Trainability flag per parameter group, in partition order."""
    trainable: Dict[str, bool]
    provenance: MaskProvenance

    def __post_init__(self):
        if not self.trainable.get(HEAD_GROUP, False):
            raise InputError("the head group must always be trainable")
        if not any(self.trainable.values()):
            raise InputError("a freeze mask needs at least one trainable group")

    @classmethod
    def full(cls, group_names: Sequence[str]) -> "FreezeMask":
        """Every group trainable, preamble included (full fine-tuning)."""
        return cls(
            trainable={name: True for name in group_names},
            provenance=MaskProvenance(variant=FULL_VARIANT),
        )

    @classmethod
    def from_selection(
        cls,
        ranked_names: Sequence[str],
        selected: Sequence[str],
        provenance: MaskProvenance,
    ) -> "FreezeMask":
        chosen = set(selected)
        trainable = {PREAMBLE_GROUP: False}
        trainable.update({name: name in chosen for name in ranked_names})
        trainable[HEAD_GROUP] = True
        return cls(trainable=trainable, provenance=provenance)

    @property
    def trainable_groups(self) -> List[str]:
        return [name for name, flag in self.trainable.items() if flag]

    @property
    def frozen_groups(self) -> List[str]:
        return [name for name, flag in self.trainable.items() if not flag]

    def check_partition(self, partition: LayerPartition) -> None:
        if tuple(self.trainable) != partition.group_names:
            raise InputError(
                f"mask groups {list(self.trainable)} do not match model groups "
                f"{list(partition.group_names)}"
            )

    def trainable_parameter_names(self, partition: LayerPartition) -> List[str]:
        self.check_partition(partition)
        names: List[str] = []
        for group in partition.groups:
            if self.trainable[group.name]:
                names.extend(group.parameter_names)
        return names

    def apply(self, model: nn.Module, partition: LayerPartition) -> List[nn.Parameter]:
        """Set requires_grad from the mask; returns the trainable parameters in model order."""
        allowed = set(self.trainable_parameter_names(partition))
        trainable = []
        for name, p in model.named_parameters():
            p.requires_grad_(name in allowed)
            if name in allowed:
                trainable.append(p)
        logger.debug(
            f"Mask {self.provenance.variant}: trainable groups {self.trainable_groups}"
        )
        return trainable

    def to_dict(self) -> Dict[str, object]:
        return {
            "trainable": dict(self.trainable),
            "variant": self.provenance.variant,
            "ranking_digest": self.provenance.ranking_digest,
            "k": self.provenance.k,
            "end": self.provenance.end,
        }
