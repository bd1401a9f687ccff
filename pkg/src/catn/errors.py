"""Exception taxonomy shared across the package.

CLI exit codes: ConfigError -> 1, DataError (and subclasses) -> 2,
DivergenceError -> 3.
"""


class CatnError(Exception):
    """Base class for all package errors."""


class ConfigError(CatnError):
    """Invalid or inconsistent run configuration."""


class DataError(CatnError):
    """Missing or malformed input data."""


class MissingDocumentError(DataError):
    """A user/item document required for a forward pass does not exist."""


class LeakageError(DataError):
    """A held-out interaction leaked into training."""


class ShapeError(CatnError):
    """Operand shapes incompatible for an engine op."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class UnknownOpError(CatnError):
    """Op name not in the engine's dispatch table."""


class DivergenceError(CatnError):
    """Training loss became non-finite."""
