from typing import Any, Type, TypeVar

from pydantic import BaseModel, ValidationError

from .errors import ConfigurationError

ConfigT = TypeVar("ConfigT", bound=BaseModel)


def describe_validation_error(error: ValidationError) -> tuple[str, str]:
    """Return (offending key path, message) for the first pydantic error."""
    first = error.errors()[0]
    key = ".".join(str(part) for part in first.get("loc", ())) or "<root>"
    return key, first.get("msg", str(error))


def parse_config(model_cls: Type[ConfigT], data: Any, *, prefix: str = "") -> ConfigT:
    """Validate `data` into `model_cls`, raising ConfigurationError on failure."""
    if isinstance(data, model_cls):
        return data
    if isinstance(data, BaseModel):
        data = data.model_dump()
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        key, message = describe_validation_error(e)
        if prefix:
            key = f"{prefix}.{key}" if key != "<root>" else prefix
        raise ConfigurationError(message, key=key) from e
