from .snapshot import (
    ParameterSnapshot,
    list_checkpoints,
    load_snapshot,
    restore,
    save_snapshot,
    snapshot,
)

__all__ = [
    "ParameterSnapshot",
    "list_checkpoints",
    "load_snapshot",
    "restore",
    "save_snapshot",
    "snapshot",
]
