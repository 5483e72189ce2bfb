import hashlib
import json
import logging
from dataclasses import asdict, is_dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict

logger = logging.getLogger(__name__)


def utc_timestamp_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def ensure_dir(path: Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def timestamped_outdir(root: Path = Path("runs"), prefix: str = "run") -> Path:
    ts_folder = datetime.now(timezone.utc).strftime(f"{prefix}-%Y%m%d_%H%M%SZ")
    return ensure_dir(Path(root) / ts_folder)


def sha256_json(data: Any) -> str:
    """Digest of a JSON-serialisable value, independent of key order."""
    encoded = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_json(
    data: Any,
    out_path: Path,
    *,
    include_timestamp: bool = True,
) -> Path:
    """Write a JSON payload, stamping it with `created_at` unless told not to."""
    payload: Dict[str, Any]
    if isinstance(data, dict):
        payload = dict(data)
    elif is_dataclass(data):
        payload = asdict(data)
    else:
        payload = {"data": data}

    if include_timestamp:
        payload["created_at"] = utc_timestamp_iso()

    out_path = Path(out_path)
    ensure_dir(out_path.parent)
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)
    logger.debug(f"Wrote {out_path}")
    return out_path


def load_json(path: Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"Failed to parse JSON from {path}: {e}")
        raise
