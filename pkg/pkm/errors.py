from typing import Any, Dict, Optional


class PKMError(Exception):
    """Base class for every error raised by the pkm package."""


class InvalidArgumentError(PKMError, ValueError):
    pass


class InvalidInputError(PKMError, ValueError):
    pass


class DegenerateBatchError(InvalidInputError):
    """Batch statistics are undefined (train-mode batch norm on one row)."""


class PreconditionError(PKMError, RuntimeError):
    pass


class FlatCeilingError(InvalidArgumentError):
    pass


class TrainingDivergedError(PKMError, RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(PKMError):
    def __init__(self, message: str, section: Optional[str] = None):
        super().__init__(message)
        self.section = section


class BadMagicError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass
