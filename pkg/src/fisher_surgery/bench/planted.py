import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from ..fisher.estimator import EstimatorMode, estimate_fim_diagonal
from ..fisher.probe import draw_probe
from ..fisher.ranking import aggregate_layer_scores, rank_layers
from ..models.base import LayeredClassifier, parameters_require_grad, predict
from ..models.config import ModelConfig, ModelKind
from ..models.data_classes import DataSplits, Example, TaskKind
from ..models.reference import build_from_config
from ..storage.snapshot import restore, snapshot
from ..utils.errors import InputError, NumericError
from .metrics import MetricKind, compute_metric
from .tasks import BenchTask, PlantedShiftSpec, ProbePolicy, TaskSpec
from .tokenizer import FIRST_WORD_ID

logger = logging.getLogger(__name__)

LABELER_ATTEMPTS = 10
_RESEED_STRIDE = 100_003


def amplify_planted_layer(
    model: LayeredClassifier, layer: int, input_gain: float, output_gain: float
) -> None:
    """
    Route the labelling function through layer `layer`, in place: its input
    projection is multiplied by `input_gain` and its output projection is
    rescaled to `output_gain` times a standard init. Labeler and shifted
    model share this.
    """
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name in model.planted_input(layer):
            params[name].mul_(input_gain)
        for name in model.planted_output(layer):
            params[name].mul_(output_gain / model.config.residual_scale)


def _outputs(model: LayeredClassifier, examples: Sequence[Example], batch_size: int = 64) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return torch.cat(
            [model(model.encode(examples[s:s + batch_size])) for s in range(0, len(examples), batch_size)]
        )


def center_outputs(model: LayeredClassifier, examples: Sequence[Example]) -> None:
    """Shift the final bias so the mean output over `examples` is zero."""
    bias = dict(model.named_parameters())[model.output_bias]
    mean = _outputs(model, examples).mean(dim=0)
    with torch.no_grad():
        bias.sub_(mean)


def _rotated_labels(model: LayeredClassifier, examples: Sequence[Example]) -> List[Example]:
    if model.task_kind == TaskKind.classification:
        return [Example(inputs=ex.inputs, label=(int(ex.label) + 1) % model.num_classes) for ex in examples]
    return [Example(inputs=ex.inputs, label=-float(ex.label)) for ex in examples]


def planted_direction(
    model: LayeredClassifier, layer: int, examples: Sequence[Example]
) -> Dict[str, torch.Tensor]:
    """
    Unit-norm direction over layer `layer`'s input weight that raises the
    log-likelihood of a rotated labelling (class y to y + 1, response y to -y).
    """
    params = dict(model.named_parameters())
    names = [name for name in model.planted_input(layer) if name.endswith("weight")]
    rotated = _rotated_labels(model, examples)
    inputs, targets = model.encode(rotated), model.encode_labels(rotated)
    model.eval()
    with parameters_require_grad(model), torch.enable_grad():
        outputs = model(inputs)
        if model.task_kind == TaskKind.classification:
            objective = -F.cross_entropy(outputs, targets, reduction="sum")
        else:
            objective = -0.5 * ((outputs[:, 0] - targets) ** 2).sum()
        grads = torch.autograd.grad(objective, [params[name] for name in names])
    norm = torch.sqrt(sum((g ** 2).sum() for g in grads))
    if not bool(torch.isfinite(norm)) or float(norm) == 0.0:
        raise NumericError(f"planted direction has norm {float(norm)}", group=f"layer_{layer}")
    return {name: g / norm for name, g in zip(names, grads)}


def apply_planted_shift(
    model: LayeredClassifier, layer: int, strength: float, direction: Dict[str, torch.Tensor]
) -> None:
    """Step the weights in `direction` by `strength` times their current norm, in place."""
    params = dict(model.named_parameters())
    with torch.no_grad():
        norm = torch.sqrt(sum((params[name] ** 2).sum() for name in direction))
        for name, unit in direction.items():
            params[name].add_(unit, alpha=strength * float(norm))
    logger.debug(f"Shifted layer {layer} by {strength:g} x {float(norm):.4f} along {list(direction)}")


def _sample_inputs(config: ModelConfig, n: int, rng: np.random.Generator) -> List[tuple]:
    if config.is_text:
        rows = []
        for _ in range(n):
            length = int(rng.integers(2, config.max_seq_len + 1))
            tokens = rng.integers(FIRST_WORD_ID, config.vocab_size, size=length)
            rows.append(tuple(int(t) for t in tokens))
        return rows
    features = rng.standard_normal((n, config.input_dim))
    return [tuple(float(v) for v in row) for row in features]


def default_task_id(spec: PlantedShiftSpec, seed: int) -> str:
    return f"planted-L{spec.num_layers}-j{spec.planted_layer}-s{spec.strength:g}-seed{seed}"


def _balanced(labels: Sequence[int], num_classes: int) -> bool:
    counts = np.bincount([int(y) for y in labels], minlength=num_classes)
    return counts.min() >= len(labels) / (2 * num_classes)


def build_labeler(
    spec: PlantedShiftSpec, seed: int, unlabeled: Sequence[Example]
) -> Tuple[LayeredClassifier, List[Union[int, float]]]:
    """
    Amplified, output-centered labeler plus its labels for `unlabeled`.
    Classification labelers whose smallest class falls under half its fair
    share are redrawn from a new seed.
    """
    for attempt in range(LABELER_ATTEMPTS):
        labeler = build_from_config(spec.build_model_config(seed + attempt * _RESEED_STRIDE))
        amplify_planted_layer(labeler, spec.planted_layer, spec.input_gain, spec.output_gain)
        center_outputs(labeler, unlabeled)
        labels = predict(labeler, unlabeled, batch_size=64)
        if spec.task_kind != TaskKind.classification or _balanced(labels, spec.num_classes):
            return labeler, labels
        counts = np.bincount(labels, minlength=spec.num_classes).tolist()
        logger.warning(f"Labeler seed {labeler.config.seed} collapsed labels to {counts}, reseeding")
    raise InputError(f"no labeler with balanced classes after {LABELER_ATTEMPTS} seeds (seed={seed})")


def generate_planted_task(
    spec: PlantedShiftSpec,
    seed: int = 0,
    *,
    task_spec: Optional[TaskSpec] = None,
) -> BenchTask:
    """
    Label random inputs with a labeler whose layer j carries the signal, then
    hand fine-tuning a copy whose layer j input weights were stepped towards a
    rotated labelling. Only that one tensor differs, so layer j is the
    informative layer by construction. The probe comes from the eval split.
    """
    num_layers = 1 if spec.model_kind == ModelKind.linear_softmax else spec.num_layers
    if not 0 <= spec.planted_layer < num_layers:
        raise InputError(f"planted layer {spec.planted_layer} outside [0, {num_layers})")

    rng = np.random.default_rng(seed)
    inputs = _sample_inputs(spec.build_model_config(seed), spec.n_train + spec.n_eval, rng)
    labeler, labels = build_labeler(spec, seed, [Example(inputs=x, label=0) for x in inputs])
    model_config = labeler.config
    examples = [Example(inputs=x, label=y) for x, y in zip(inputs, labels)]
    data = DataSplits(train=examples[: spec.n_train], eval=examples[spec.n_train:])

    labeler_state = snapshot(labeler)
    direction = planted_direction(labeler, spec.planted_layer, data.train)

    def model_factory() -> LayeredClassifier:
        model = build_from_config(model_config)
        restore(model, labeler_state)
        apply_planted_shift(model, spec.planted_layer, spec.strength, direction)
        return model

    metric = MetricKind.accuracy if spec.task_kind == TaskKind.classification else MetricKind.pearson
    if task_spec is None:
        task_spec = TaskSpec(
            task_id=default_task_id(spec, seed),
            task_kind=spec.task_kind,
            metric=metric,
            num_classes=spec.num_classes,
            source=spec,
            probe=ProbePolicy(size=spec.n_probe, seed=seed),
            seed=seed,
        )
    probe = draw_probe(data.eval, task_spec.probe.size, task_spec.probe.seed)

    metric = MetricKind(task_spec.metric)
    shifted_metric = compute_metric(
        metric, predict(model_factory(), data.eval), [ex.label for ex in data.eval]
    )
    logger.info(
        f"Planted task {task_spec.task_id}: shifted model starts at "
        f"{metric.value}={shifted_metric:.4f} against its labeler"
    )

    return BenchTask(
        spec=task_spec,
        data=data,
        probe=probe,
        model_factory=model_factory,
        planted_layer=spec.planted_layer,
        manifest={
            "planted_layer": spec.planted_layer,
            "strength": spec.strength,
            "input_gain": spec.input_gain,
            "output_gain": spec.output_gain,
            "labeler_seed": model_config.seed,
            "shifted_parameters": list(direction),
            "shifted_eval_metric": shifted_metric,
            "labeler_digest": labeler_state.digest,
            "model": model_config.model_dump(mode="json"),
            "probe_digest": probe.digest,
        },
    )


@dataclass
class LocalizationResult:
    planted_layer: int
    seeds: List[int]
    top_layers: List[int]

    @property
    def hits(self) -> int:
        return sum(layer == self.planted_layer for layer in self.top_layers)

    @property
    def rate(self) -> float:
        return self.hits / len(self.seeds) if self.seeds else 0.0


def localization_rate(
    spec: PlantedShiftSpec,
    seeds: Sequence[int],
    mode: Union[EstimatorMode, str] = EstimatorMode.exact,
    normalized: bool = False,
) -> LocalizationResult:
    """How often the top Fisher-ranked layer of the shifted model is the planted one."""
    top_layers = []
    for seed in seeds:
        task = generate_planted_task(spec, seed)
        model = task.model_factory()
        fim = estimate_fim_diagonal(model, task.probe, mode=mode, seed=seed)
        ranking = rank_layers(aggregate_layer_scores(fim, model.partition, normalized=normalized))
        top_layers.append(ranking.order[0])
        logger.debug(f"seed {seed}: top layer {ranking.order[0]} (planted {spec.planted_layer})")
    result = LocalizationResult(spec.planted_layer, list(seeds), top_layers)
    logger.info(f"Planted layer recovered in {result.hits}/{len(result.seeds)} seeds")
    return result
