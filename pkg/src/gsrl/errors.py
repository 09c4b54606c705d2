"""Exception types shared across the package."""
from __future__ import annotations


class GSRLError(Exception):
    pass


class ContractViolation(GSRLError, ValueError):
    """An operation was called with inputs that break its preconditions."""


class ShapeError(ContractViolation):
    pass


class ConfigError(GSRLError, ValueError):
    pass


class DatasetError(GSRLError, RuntimeError):
    pass


class GenerationError(GSRLError, ValueError):
    """Synthetic scene parameters violate a geometric constraint."""


class TrainingAborted(GSRLError, RuntimeError):
    """A training step produced a non-finite loss or broke the freeze contract.

    ``dump`` carries the diagnostic values captured at the failing step.
    """

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


class PlyParseError(GSRLError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
