from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data_classes import TaskKind


class ModelKind(str, Enum):
    linear_softmax = "linear-softmax"
    tiny_mlp = "tiny-mlp"
    tiny_transformer = "tiny-transformer"


class ModelConfig(BaseModel):
    """Shape and initialization settings for a reference model."""
    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    kind: ModelKind = Field(ModelKind.tiny_mlp, description="Reference architecture")
    num_layers: int = Field(2, description="Number of ranked layers L", ge=1)
    hidden_width: int = Field(16, description="Hidden width of every block", ge=1)
    input_dim: int = Field(8, description="Feature count for tabular models", ge=1)
    vocab_size: int = Field(512, description="Token vocabulary size (text models)", ge=4)
    num_classes: int = Field(2, description="Number of classes", ge=1)
    max_seq_len: int = Field(32, description="Maximum token sequence length", ge=2)
    num_heads: int = Field(2, description="Attention heads (transformer)", ge=1)
    task_kind: TaskKind = Field(TaskKind.classification, description="Classification or regression")
    residual_scale: float = Field(
        0.1, description="Initial scale of each block's output projection", gt=0.0
    )
    seed: int = Field(0, description="Initialization seed")

    @model_validator(mode="after")
    def _check_consistency(self) -> "ModelConfig":
        if self.task_kind == TaskKind.classification and self.num_classes < 2:
            raise ValueError("num_classes must be at least 2 for classification")
        if self.kind == ModelKind.tiny_transformer and self.hidden_width % self.num_heads:
            raise ValueError("hidden_width must be divisible by num_heads")
        return self

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.task_kind == TaskKind.classification else 1

    @property
    def is_text(self) -> bool:
        return self.kind == ModelKind.tiny_transformer
