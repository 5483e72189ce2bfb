from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Sequence, Tuple, Union

from ..utils.errors import ConfigurationError


class TaskKind(str, Enum):
    classification = "classification"
    regression = "regression"


PREAMBLE_GROUP = "preamble"
HEAD_GROUP = "head"

# Reserved token ids shared by the text model and the tokenizer.
PAD_ID = 0
UNK_ID = 1
SEP_ID = 2


def ranked_group_name(index: int) -> str:
    return f"layer_{index}"


@dataclass(frozen=True)
class Example:
    """One labelled record: token ids for text models, a feature vector otherwise."""
    inputs: Tuple[Union[int, float], ...]
    label: Union[int, float]

    def __post_init__(self):
        if not isinstance(self.inputs, tuple):
            object.__setattr__(self, "inputs", tuple(self.inputs))


@dataclass(frozen=True)
class LayerGroup:
    name: str
    parameter_names: Tuple[str, ...]


@dataclass(frozen=True)
class LayerPartition:
    """Assignment of every parameter to the preamble, one ranked layer, or the head.

    ranked_groups are in depth order: index 0 is closest to the input.
    """
    ranked_groups: Tuple[LayerGroup, ...]
    preamble_group: LayerGroup
    head_group: LayerGroup
    _owner: Dict[str, str] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        owner: Dict[str, str] = {}
        for group in self.groups:
            for name in group.parameter_names:
                if name in owner:
                    raise ConfigurationError(
                        f"parameter {name} assigned to both {owner[name]} and {group.name}"
                    )
                owner[name] = group.name
        object.__setattr__(self, "_owner", owner)

    @property
    def num_layers(self) -> int:
        return len(self.ranked_groups)

    @property
    def groups(self) -> Tuple[LayerGroup, ...]:
        return (self.preamble_group, *self.ranked_groups, self.head_group)

    @property
    def group_names(self) -> Tuple[str, ...]:
        return tuple(group.name for group in self.groups)

    @property
    def ranked_names(self) -> Tuple[str, ...]:
        return tuple(group.name for group in self.ranked_groups)

    def group(self, name: str) -> LayerGroup:
        for group in self.groups:
            if group.name == name:
                return group
        raise KeyError(f"Unknown parameter group: {name}")

    def group_of(self, parameter_name: str) -> str:
        return self._owner[parameter_name]

    def validate(self, parameter_names: Sequence[str]) -> None:
        """Check that the groups cover exactly the given parameter names."""
        expected = set(parameter_names)
        covered = set(self._owner)
        if expected != covered:
            missing = sorted(expected - covered)
            extra = sorted(covered - expected)
            raise ConfigurationError(
                f"partition does not match parameters (unassigned={missing}, unknown={extra})"
            )


@dataclass(frozen=True)
class DataSplits:
    """Materialized train and eval examples of one task."""
    train: Tuple[Example, ...]
    eval: Tuple[Example, ...]

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "eval", tuple(self.eval))
