from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

DEFAULT_CHECKPOINT_EPOCHS = (0, 2, 5, 8, 10)


class TrainConfig(BaseModel):
    """Fine-tuning hyperparameters; defaults follow the usual encoder fine-tuning recipe."""
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(16, description="Training batch size", ge=1)
    eval_batch_size: int = Field(16, description="Evaluation batch size", ge=1)
    learning_rate: float = Field(5e-5, description="AdamW learning rate", gt=0.0)
    epochs: int = Field(10, description="Number of training epochs", ge=1)
    weight_decay: float = Field(0.01, description="Decoupled weight decay", ge=0.0)
    seed: int = Field(0, description="Seed for data order")
    checkpoint_epochs: Optional[List[int]] = Field(
        None, description="Epochs at which parameters are snapshotted (0 = before training)"
    )
    optimizer: Literal["adamw"] = Field("adamw", description="Optimizer (recorded)")
    lr_schedule: Literal["constant"] = Field("constant", description="Learning-rate schedule")

    @model_validator(mode="after")
    def _resolve_checkpoints(self) -> "TrainConfig":
        if self.checkpoint_epochs is None:
            epochs = {e for e in DEFAULT_CHECKPOINT_EPOCHS if e <= self.epochs}
            epochs.add(self.epochs)
            self.checkpoint_epochs = sorted(epochs)
        else:
            outside = [e for e in self.checkpoint_epochs if not 0 <= e <= self.epochs]
            if outside:
                raise ValueError(
                    f"checkpoint_epochs {outside} outside [0, {self.epochs}]"
                )
            self.checkpoint_epochs = sorted(set(self.checkpoint_epochs))
        return self
