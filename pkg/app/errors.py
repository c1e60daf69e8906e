"""Pipeline exceptions and their process exit codes."""

from typing import Iterable, Optional


class PipelineError(Exception):
    """Base error carrying a process exit code and a human-readable detail."""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class UsageError(PipelineError):
    """Bad command-line usage."""

    exit_code = 1


class ConfigError(PipelineError):
    """Invalid or unknown configuration key."""

    exit_code = 1


class ShapeError(PipelineError):
    """Tensor shapes do not agree."""

    exit_code = 1


class DataFileError(PipelineError):
    """Input unreadable or output unwritable."""

    exit_code = 2


class InsufficientUsersError(PipelineError):
    """Not enough users for the requested operation."""

    exit_code = 3


class DivergenceError(PipelineError):
    """Loss or gradient became non-finite."""

    exit_code = 4

    def __init__(self, detail: str, parameter: Optional[str] = None):
        super().__init__(detail)
        self.parameter = parameter


class CheckpointVersionError(PipelineError):
    """Checkpoint written by an incompatible format version."""

    exit_code = 5


class CheckpointIntegrityError(PipelineError):
    """Checkpoint truncated or corrupted."""

    exit_code = 5


class UnknownAttributeError(PipelineError):
    """Requested label attribute is not present in the data."""

    exit_code = 6

    def __init__(self, attribute: str, available: Iterable[str]):
        self.attribute = attribute
        self.available = sorted(available)
        listing = ", ".join(self.available) or "none"
        super().__init__(
            f"Unknown attribute '{attribute}'. Available attributes: {listing}"
        )
