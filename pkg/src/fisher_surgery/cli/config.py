import copy
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..bench.tasks import ProbePolicy, TaskSpec
from ..models.config import ModelConfig
from ..surgery.config import TrainConfig
from ..utils.config import parse_config
from ..utils.errors import ConfigurationError
from ..utils.io import load_json

logger = logging.getLogger(__name__)

SEEDED_SECTIONS = ("model", "train", "probe")


class OutputConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dir: Path = Field(Path("runs"), description="Root directory for run outputs")
    keep_checkpoints: bool = Field(False, description="Write per-trial checkpoints in sweeps")


class Provenance(BaseModel):
    config_path: Optional[str] = None
    overrides: Dict[str, Any] = Field(default_factory=dict)


class RunConfig(BaseModel):
    """
    Fully resolved configuration of one `fim` invocation. Section seeds and
    task probe policies inherit from the top level unless set explicitly.
    """
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    seed: int = Field(0, description="Default seed for every section")
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    probe: ProbePolicy = Field(default_factory=ProbePolicy)
    tasks: List[TaskSpec] = Field(default_factory=list)
    output: OutputConfig = Field(default_factory=OutputConfig)
    provenance: Provenance = Field(default_factory=Provenance)

    @model_validator(mode="before")
    @classmethod
    def _inherit_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = copy.deepcopy(data)
        seed = data.get("seed", 0)
        for section in SEEDED_SECTIONS:
            values = data.get(section)
            if values is None or isinstance(values, dict):
                values = dict(values or {})
                values.setdefault("seed", seed)
                data[section] = values

        run_probe = data["probe"] if isinstance(data.get("probe"), dict) else {}
        tasks = data.get("tasks") or []
        for task in tasks:
            if not isinstance(task, dict):
                continue
            task.setdefault("seed", seed)
            task["probe"] = {**run_probe, **(task.get("probe") or {})}
            source = task.get("source") or {}
            if source.get("type") == "jsonl" and "model" not in task and "model" in data:
                task["model"] = data["model"]
        return data

    def task(self, task_id: str) -> TaskSpec:
        for spec in self.tasks:
            if spec.task_id == task_id:
                return spec
        known = [spec.task_id for spec in self.tasks]
        raise ConfigurationError(f"unknown task {task_id!r}; configured tasks: {known}", key="tasks")

    def manifest(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)


def _set_path(data: Dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = data
    for part in parents:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[leaf] = value


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Apply dotted-key flag values; probe and seed flags also reach every task entry."""
    data = copy.deepcopy(data)
    for key, value in overrides.items():
        if key == "seed":
            data["seed"] = value
            for section in SEEDED_SECTIONS:
                if isinstance(data.get(section), dict):
                    data[section]["seed"] = value
            for task in data.get("tasks") or []:
                if isinstance(task, dict):
                    task["seed"] = value
                    if isinstance(task.get("probe"), dict):
                        task["probe"]["seed"] = value
            continue
        _set_path(data, key, value)
        if key.startswith("probe."):
            for task in data.get("tasks") or []:
                if isinstance(task, dict) and isinstance(task.get("probe"), dict):
                    _set_path(task["probe"], key.split(".", 1)[1], value)
    return data


def load_run_config(
    path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """defaults < config file < flag overrides; records where each value came from."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    data: Dict[str, Any] = {}
    if path is not None:
        loaded = load_json(Path(path))
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a JSON object", key="<root>")
        data = loaded
    data.pop("provenance", None)
    data = apply_overrides(data, overrides)
    data["provenance"] = {
        "config_path": str(path) if path is not None else None,
        "overrides": overrides,
    }
    config = parse_config(RunConfig, data)
    logger.debug(f"Resolved run config from {path or 'defaults'} with overrides {overrides}")
    return config
