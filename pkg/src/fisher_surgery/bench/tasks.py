from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..fisher.estimator import EstimatorMode
from ..fisher.probe import DEFAULT_PROBE_SIZE, Probe
from ..models.base import LayeredClassifier
from ..models.config import ModelConfig, ModelKind
from ..models.data_classes import DataSplits, TaskKind
from .metrics import MetricKind, metric_fits_task


class ProbePolicy(BaseModel):
    """How the Fisher probe is drawn from the eval split and scored."""
    model_config = ConfigDict(extra="forbid")

    size: int = Field(DEFAULT_PROBE_SIZE, description="Probe examples drawn from eval", ge=1)
    seed: int = Field(0, description="Probe sampling seed")
    mode: EstimatorMode = Field(EstimatorMode.exact, description="Fisher estimator mode")
    normalized: bool = Field(False, description="Divide layer scores by sqrt(group size)")
    num_samples: int = Field(1, description="Label draws per example (sampled mode)", ge=1)


class PlantedShiftSpec(BaseModel):
    """Synthetic task labelled by a reference model whose fine-tuned copy has one ranked layer shifted."""
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    type: Literal["planted"] = "planted"
    model_kind: ModelKind = Field(ModelKind.tiny_mlp, description="Reference architecture")
    num_layers: int = Field(4, description="Depth L of the base model", ge=1)
    planted_layer: int = Field(2, description="Index j of the shifted layer", ge=0)
    strength: float = Field(
        0.25, description="Step on layer j's input weights, relative to their norm", ge=0.0
    )
    input_gain: float = Field(
        2.0, description="Gain on layer j's input projection, shared with the labeler", gt=0.0
    )
    output_gain: float = Field(
        6.0,
        description="Layer j's output projection as a multiple of a standard init, shared with the labeler",
        gt=0.0,
    )
    hidden_width: int = Field(16, ge=1)
    input_dim: int = Field(8, ge=1)
    vocab_size: int = Field(64, ge=4)
    max_seq_len: int = Field(12, ge=2)
    num_classes: int = Field(3, ge=1)
    task_kind: TaskKind = TaskKind.classification
    n_train: int = Field(200, description="Training examples", ge=1)
    n_eval: int = Field(100, description="Eval examples (probe source)", ge=1)
    n_probe: int = Field(DEFAULT_PROBE_SIZE, description="Probe size", ge=1)

    @model_validator(mode="after")
    def _check_layer(self) -> "PlantedShiftSpec":
        layers = 1 if self.model_kind == ModelKind.linear_softmax else self.num_layers
        if self.planted_layer >= layers:
            raise ValueError(f"planted_layer {self.planted_layer} must be < L={layers}")
        if self.task_kind == TaskKind.classification and self.num_classes < 2:
            raise ValueError("planted classification tasks need at least 2 classes")
        return self

    def build_model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(
            kind=self.model_kind,
            num_layers=self.num_layers,
            hidden_width=self.hidden_width,
            input_dim=self.input_dim,
            vocab_size=self.vocab_size,
            max_seq_len=self.max_seq_len,
            num_classes=self.num_classes,
            task_kind=self.task_kind,
            seed=seed,
        )


class RecordSchema(str, Enum):
    single_text = "single-text"
    text_pair = "text-pair"
    features = "features"


class JsonlSource(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    type: Literal["jsonl"] = "jsonl"
    path: Path
    eval_path: Optional[Path] = Field(None, description="Separate eval file; otherwise split")
    schema_kind: RecordSchema = Field(RecordSchema.single_text, alias="schema")
    label_map: Dict[str, Union[int, float]] = Field(default_factory=dict)
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    split_seed: int = 0


class TaskSpec(BaseModel):
    """One benchmark task: where its data comes from and how it is scored."""
    model_config = ConfigDict(extra="forbid")

    task_id: str
    task_kind: TaskKind = TaskKind.classification
    metric: MetricKind = MetricKind.accuracy
    num_classes: int = Field(2, ge=1)
    source: Union[PlantedShiftSpec, JsonlSource] = Field(..., discriminator="type")
    probe: ProbePolicy = Field(default_factory=ProbePolicy)
    model: Optional[ModelConfig] = Field(
        None, description="Model for JSONL tasks (planted tasks derive their own)"
    )
    seed: int = 0

    @model_validator(mode="after")
    def _check_metric(self) -> "TaskSpec":
        if not metric_fits_task(self.metric, self.task_kind):
            raise ValueError(
                f"metric {self.metric.value} does not fit a {self.task_kind.value} task"
            )
        return self


@dataclass
class BenchTask:
    """A TaskSpec with its data materialized and a factory for the model to fine-tune."""
    spec: TaskSpec
    data: DataSplits
    probe: Probe
    model_factory: Callable[[], LayeredClassifier]
    manifest: Dict[str, Any] = field(default_factory=dict)
    planted_layer: Optional[int] = None

    @property
    def task_id(self) -> str:
        return self.spec.task_id
