import hashlib
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch

from ..models.base import LayeredClassifier
from ..utils.errors import SnapshotError
from ..utils.io import ensure_dir, load_json, save_json

logger = logging.getLogger(__name__)

CHECKPOINT_PATTERN = re.compile(r"^ckpt_epoch(\d+)$")


def content_digest(values: Dict[str, torch.Tensor]) -> str:
    """sha256 over parameter names, shapes, dtypes and raw bytes, in store order."""
    digest = hashlib.sha256()
    for name, tensor in values.items():
        array = tensor.detach().cpu().contiguous().numpy()
        digest.update(name.encode("utf-8"))
        digest.update(repr((tuple(array.shape), str(array.dtype))).encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()


@dataclass(frozen=True)
class ParameterSnapshot:
    """Exact copy of a model's parameters plus the digests that identify it."""
    values: Dict[str, torch.Tensor]
    digest: str
    architecture_digest: str
    epoch: Optional[int] = None
    model_config: Dict[str, Any] = field(default_factory=dict)

    @property
    def shapes(self) -> Dict[str, List[int]]:
        return {name: list(t.shape) for name, t in self.values.items()}

    def manifest(self) -> Dict[str, Any]:
        return {
            "architecture_digest": self.architecture_digest,
            "parameters": [[name, shape] for name, shape in self.shapes.items()],
            "content_digest": self.digest,
            "epoch": self.epoch,
            "model_config": self.model_config,
        }


def snapshot(model: LayeredClassifier, epoch: Optional[int] = None) -> ParameterSnapshot:
    values = {name: p.detach().clone() for name, p in model.named_parameters()}
    return ParameterSnapshot(
        values=values,
        digest=content_digest(values),
        architecture_digest=model.architecture_digest(),
        epoch=epoch,
        model_config=model.config.model_dump(mode="json"),
    )


def restore(model: LayeredClassifier, snap: ParameterSnapshot) -> None:
    """Copy snapshot values into the model; the model must share its architecture."""
    expected = model.architecture_digest()
    if snap.architecture_digest != expected:
        raise SnapshotError(
            f"architecture mismatch: snapshot {snap.architecture_digest[:12]} "
            f"vs model {expected[:12]}"
        )
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(snap.values[name])


def save_snapshot(snap: ParameterSnapshot, directory: Path, stem: Optional[str] = None) -> Path:
    """Write `<stem>.pt` and the sidecar `<stem>.json`; returns the manifest path."""
    directory = ensure_dir(Path(directory))
    if stem is None:
        if snap.epoch is None:
            raise SnapshotError("snapshot has no epoch tag; pass an explicit file stem")
        stem = f"ckpt_epoch{snap.epoch}"
    torch.save(snap.values, directory / f"{stem}.pt")
    manifest_path = directory / f"{stem}.json"
    save_json(
        {**snap.manifest(), "tensor_file": f"{stem}.pt"},
        manifest_path,
        include_timestamp=False,
    )
    logger.debug(f"Saved snapshot {snap.digest[:12]} to {manifest_path}")
    return manifest_path


def load_snapshot(manifest_path: Path) -> ParameterSnapshot:
    manifest_path = Path(manifest_path)
    manifest = load_json(manifest_path)
    tensor_path = manifest_path.with_name(manifest.get("tensor_file", manifest_path.stem + ".pt"))
    if not tensor_path.exists():
        raise FileNotFoundError(f"Snapshot tensor file not found: {tensor_path}")

    loaded = torch.load(tensor_path, weights_only=True)
    order = [name for name, _ in manifest["parameters"]]
    if set(order) != set(loaded):
        raise SnapshotError(f"{tensor_path} does not hold the parameters its manifest lists")
    values = {name: loaded[name] for name in order}
    digest = content_digest(values)
    if digest != manifest["content_digest"]:
        raise SnapshotError(
            f"content digest mismatch for {tensor_path}: "
            f"expected {manifest['content_digest'][:12]}, got {digest[:12]}"
        )
    return ParameterSnapshot(
        values=values,
        digest=digest,
        architecture_digest=manifest["architecture_digest"],
        epoch=manifest.get("epoch"),
        model_config=manifest.get("model_config", {}),
    )


def list_checkpoints(directory: Path) -> List[Path]:
    """Manifest paths of `ckpt_epoch{N}` files, ordered by epoch."""
    directory = Path(directory)
    if not directory.exists():
        raise FileNotFoundError(f"Checkpoint directory not found: {directory}")
    found = []
    for path in directory.glob("ckpt_epoch*.json"):
        match = CHECKPOINT_PATTERN.match(path.stem)
        if match:
            found.append((int(match.group(1)), path))
    return [path for _, path in sorted(found)]
