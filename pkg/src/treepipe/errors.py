"""Exception hierarchy shared across the package."""


class TreePipeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidTokenError(TreePipeError):
    """A token id is outside the configured vocabulary."""


class TreeStructureError(TreePipeError):
    """A tree operation received structurally invalid input."""


class OrderingError(TreeStructureError):
    """Children handed to layer_append violate the required sort order."""


class ShapeError(TreePipeError):
    """Tensor dimensions do not line up."""


class ContractViolation(TreePipeError):
    """A caller broke an operation's precondition (e.g. dropping prefix KV)."""


class InvariantViolation(TreePipeError):
    """Internal state became inconsistent; the run must abort."""


class SourceUnavailable(TreePipeError):
    """The draft source could not deliver a level for this step."""


class DraftExhausted(SourceUnavailable):
    """A replay trace ran out of records; the run stops cleanly."""


class TraceParseError(TreePipeError):
    """A trace file is malformed."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigError(TreePipeError):
    """A run configuration is invalid or incomplete."""
