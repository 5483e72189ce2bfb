import pytest

from fisher_surgery.bench.tasks import PlantedShiftSpec
from fisher_surgery.models import build_reference_model
from fisher_surgery.surgery.config import TrainConfig

from .helpers import tabular_examples


@pytest.fixture
def mlp_model():
    return build_reference_model(
        "tiny-mlp", {"num_layers": 3, "hidden_width": 8, "input_dim": 4, "num_classes": 3}, seed=0
    )


@pytest.fixture
def mlp_examples():
    return tabular_examples(20, 4, 3, seed=0)


@pytest.fixture
def small_planted_spec():
    return PlantedShiftSpec(
        num_layers=2,
        planted_layer=1,
        strength=0.5,
        hidden_width=8,
        input_dim=4,
        num_classes=2,
        n_train=24,
        n_eval=12,
        n_probe=8,
    )


@pytest.fixture
def quick_train_config():
    return TrainConfig(epochs=2, learning_rate=1e-2, batch_size=8, seed=0)
