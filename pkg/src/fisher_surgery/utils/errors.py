from typing import Optional


class FisherSurgeryError(Exception):
    """Base class for every error raised by fisher_surgery."""


class ConfigurationError(FisherSurgeryError, ValueError):
    """Invalid model, training or run configuration."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class InputError(FisherSurgeryError, ValueError):
    """Inputs incompatible with the model or operation."""


class NumericError(FisherSurgeryError, ArithmeticError):
    """Non-finite values during scoring or training."""

    def __init__(
        self,
        message: str,
        group: Optional[str] = None,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
    ):
        self.group = group
        self.epoch = epoch
        self.batch = batch
        details = []
        if epoch is not None:
            details.append(f"epoch={epoch}")
        if batch is not None:
            details.append(f"batch={batch}")
        if group is not None:
            details.append(f"group={group}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")


class SnapshotError(FisherSurgeryError):
    """Snapshot does not belong to the model it is restored into, or is corrupt."""


class RefusalError(FisherSurgeryError):
    """Operation refused because the problem exceeds its size limits."""


class DegenerateMetricError(InputError):
    """Metric is undefined for these predictions, e.g. a correlation of a constant."""
