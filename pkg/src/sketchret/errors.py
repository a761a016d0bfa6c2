"""Exception types shared across the package."""


class SketchretError(Exception):
    """Base class for all package errors."""


class DimensionError(SketchretError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(SketchretError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(SketchretError, ValueError):
    """Architecture or runtime configuration is inconsistent."""


class InputError(SketchretError, ValueError):
    """External input (image file, payload) could not be used."""


class LayoutError(SketchretError, ValueError):
    """On-disk dataset layout does not match the expected structure."""


class SamplingError(SketchretError, ValueError):
    """Dataset cannot support the requested sampling scheme."""


class FormatError(SketchretError, ValueError):
    """A serialized artifact is malformed. Carries a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckError(SketchretError, ValueError):
    """Gradient / consistency checking could not be performed."""
