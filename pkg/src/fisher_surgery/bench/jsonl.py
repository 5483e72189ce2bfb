import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from ..fisher.probe import draw_probe
from ..models.config import ModelConfig, ModelKind
from ..models.data_classes import DataSplits, Example, TaskKind
from ..models.reference import build_from_config
from ..utils.errors import InputError
from ..utils.io import sha256_file
from .tasks import BenchTask, JsonlSource, RecordSchema, TaskSpec
from .tokenizer import HashingTokenizer

logger = logging.getLogger(__name__)

_REQUIRED_FIELDS = {
    RecordSchema.single_text: ("text",),
    RecordSchema.text_pair: ("text_a", "text_b"),
    RecordSchema.features: ("features",),
}


@dataclass
class JsonlDataset:
    splits: DataSplits
    num_classes: int
    task_kind: TaskKind
    label_map: Dict[str, Union[int, float]]
    manifest: Dict[str, Any] = field(default_factory=dict)


def _resolve_label(
    raw: Any,
    label_map: Mapping[str, Union[int, float]],
    task_kind: TaskKind,
    where: str,
) -> Union[int, float]:
    if label_map:
        key = str(raw).lower() if isinstance(raw, bool) else str(raw)
        if key not in label_map:
            raise InputError(f"{where}: unknown label {raw!r}; label map is {dict(label_map)}")
        value = label_map[key]
    else:
        value = raw
    if task_kind == TaskKind.regression:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InputError(f"{where}: regression label {raw!r} is not numeric")
        return float(value)
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise InputError(
            f"{where}: label {raw!r} is not a class index; label map is {dict(label_map)}"
        )
    return value


def _record_inputs(
    record: Dict[str, Any],
    schema: RecordSchema,
    tokenizer: Optional[HashingTokenizer],
    where: str,
) -> tuple:
    if schema == RecordSchema.features:
        values = record["features"]
        if not isinstance(values, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
        ):
            raise InputError(f"{where}: features must be a list of numbers")
        return tuple(float(v) for v in values)
    if tokenizer is None:
        raise InputError(f"{where}: text records need a tokenizer")
    if schema == RecordSchema.text_pair:
        return tuple(tokenizer.encode(str(record["text_a"]), str(record["text_b"])))
    return tuple(tokenizer.encode(str(record["text"])))


def read_jsonl_records(
    path: Path,
    schema: RecordSchema,
    label_map: Mapping[str, Union[int, float]],
    task_kind: TaskKind,
    tokenizer: Optional[HashingTokenizer] = None,
) -> List[Example]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    required = _REQUIRED_FIELDS[schema] + ("label",)
    examples: List[Example] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            where = f"{path}:{line_no}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{where}: malformed JSON ({e.msg})") from e
            if not isinstance(record, dict):
                raise InputError(f"{where}: expected a JSON object")
            missing = [key for key in required if key not in record]
            if missing:
                raise InputError(f"{where}: missing fields {missing}")

            inputs = _record_inputs(record, schema, tokenizer, where)
            label = _resolve_label(record["label"], label_map, task_kind, where)
            examples.append(Example(inputs=inputs, label=label))
    if not examples:
        raise InputError(f"{path} contains no records")
    return examples


def split_examples(
    examples: List[Example], train_fraction: float = 0.8, seed: int = 0
) -> Tuple[List[Example], List[Example]]:
    """Seeded shuffle into train/eval; membership depends only on (len, fraction, seed)."""
    n = len(examples)
    if n < 2:
        raise InputError(f"cannot split {n} record(s) into non-empty train and eval sets")
    n_train = min(max(int(round(n * train_fraction)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(order[:n_train])
    eval_idx = np.sort(order[n_train:])
    return [examples[int(i)] for i in train_idx], [examples[int(i)] for i in eval_idx]


def ingest_jsonl(
    path: Path,
    schema: Union[RecordSchema, str] = RecordSchema.single_text,
    label_map: Optional[Mapping[str, Union[int, float]]] = None,
    *,
    task_kind: TaskKind = TaskKind.classification,
    eval_path: Optional[Path] = None,
    train_fraction: float = 0.8,
    split_seed: int = 0,
    tokenizer: Optional[HashingTokenizer] = None,
) -> JsonlDataset:
    """
    Parse JSON lines into examples. Text records are `{"text": ...}` or
    `{"text_a": ..., "text_b": ...}`, feature records `{"features": [...]}`,
    each with a "label". Without `eval_path` the file is split by a seeded
    shuffle.
    """
    schema = RecordSchema(schema)
    label_map = dict(label_map or {})
    if schema != RecordSchema.features:
        tokenizer = tokenizer or HashingTokenizer()

    records = read_jsonl_records(path, schema, label_map, task_kind, tokenizer)
    if eval_path is not None:
        train = records
        evaluation = read_jsonl_records(eval_path, schema, label_map, task_kind, tokenizer)
    else:
        train, evaluation = split_examples(records, train_fraction, split_seed)

    num_classes = infer_num_classes(train + evaluation, label_map, task_kind)
    digests = {"data": sha256_file(path)}
    if eval_path is not None:
        digests["eval_data"] = sha256_file(eval_path)
    logger.info(
        f"Ingested {path}: {len(train)} train / {len(evaluation)} eval, {num_classes} classes"
    )
    return JsonlDataset(
        splits=DataSplits(train=train, eval=evaluation),
        num_classes=num_classes,
        task_kind=task_kind,
        label_map=label_map,
        manifest={
            "schema": schema.value,
            "tokenizer": tokenizer.describe() if tokenizer else None,
            "split_seed": split_seed,
            "train_fraction": train_fraction,
            "input_digests": digests,
        },
    )


def infer_num_classes(
    examples: List[Example],
    label_map: Mapping[str, Union[int, float]],
    task_kind: TaskKind,
) -> int:
    if task_kind == TaskKind.regression:
        return 1
    if label_map:
        top = int(max(label_map.values()))
    else:
        top = max(int(ex.label) for ex in examples)
    return max(top + 1, 2)


def jsonl_task(spec: TaskSpec) -> BenchTask:
    source = spec.source
    if not isinstance(source, JsonlSource):
        raise InputError(f"task {spec.task_id} is not a JSONL task")
    is_text = source.schema_kind != RecordSchema.features
    if spec.model is None and not is_text:
        raise InputError(f"task {spec.task_id}: feature records need an explicit model config")
    model_config = spec.model or ModelConfig(
        kind=ModelKind.tiny_transformer,
        num_classes=spec.num_classes,
        task_kind=spec.task_kind,
        seed=spec.seed,
    )
    if model_config.is_text != is_text:
        raise InputError(
            f"task {spec.task_id}: {source.schema_kind.value} records do not fit "
            f"a {model_config.kind.value} model"
        )
    tokenizer = (
        HashingTokenizer(model_config.vocab_size, model_config.max_seq_len) if is_text else None
    )
    dataset = ingest_jsonl(
        source.path,
        source.schema_kind,
        source.label_map,
        task_kind=spec.task_kind,
        eval_path=source.eval_path,
        train_fraction=source.train_fraction,
        split_seed=source.split_seed,
        tokenizer=tokenizer,
    )
    if dataset.num_classes > model_config.num_classes and spec.task_kind == TaskKind.classification:
        model_config = model_config.model_copy(update={"num_classes": dataset.num_classes})

    probe = draw_probe(dataset.splits.eval, spec.probe.size, spec.probe.seed)
    return BenchTask(
        spec=spec,
        data=dataset.splits,
        probe=probe,
        model_factory=lambda: build_from_config(model_config),
        manifest={
            **dataset.manifest,
            "model": model_config.model_dump(mode="json"),
            "probe_digest": probe.digest,
        },
    )
