__all__ = (
    "FLESTGeneric",
    "ShapeGeneric",
    "ShapeMismatch",
    "IndexOutOfRange",
    "NonFiniteValue",
    "DataGeneric",
    "MalformedTriple",
    "PartitionError",
    "EmptySplit",
    "ProtocolGeneric",
    "ProtocolError",
    "MessageCorrupt",
    "ConfigGeneric",
    "ConfigError",
    "CheckpointGeneric",
    "CheckpointCorrupt",
    "GradientCheckFailed",
)


class FLESTGeneric(Exception):
    """A generic exception to raise. Subclassed by every other exception in flestlib."""
    pass


class ShapeGeneric(FLESTGeneric):
    """A generic shape-related exception, Subclassed by all other shape-related exceptions."""


class ShapeMismatch(ShapeGeneric):
    """Raised when two operands do not have compatible shapes."""

    def __init__(self, operation: str, left: tuple[int, ...], right: tuple[int, ...]):
        self.operation = operation
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{operation}: shape {self.left} is incompatible with shape {self.right}.")


class IndexOutOfRange(ShapeGeneric):
    """Raised when an entity or relation id is outside of the local vocabulary."""


class NonFiniteValue(ShapeGeneric):
    """Raised when a tensor value would hold a NaN or Inf."""


class DataGeneric(FLESTGeneric):
    """A generic dataset-related exception, Subclassed by all other dataset-related exceptions."""


class MalformedTriple(DataGeneric):
    """Raised when a line of a triple file is not valid UTF-8 or not exactly three tab separated fields."""

    def __init__(self, line_number: int, line: str, reason: str = 'not "head<TAB>relation<TAB>tail"'):
        self.line_number = line_number
        self.line = line
        super().__init__(f'Line {line_number} is {reason}: "{line}"')


class PartitionError(DataGeneric):
    """Raised when triples cannot be partitioned among the requested number of clients."""


class EmptySplit(DataGeneric):
    """Raised when an operation needs triples but the requested split has none."""


class ProtocolGeneric(FLESTGeneric):
    """A generic federation protocol exception, Subclassed by all other protocol exceptions."""


class ProtocolError(ProtocolGeneric):
    """Raised when clients or uploads disagree on rank, shape, or round."""


class MessageCorrupt(ProtocolGeneric):
    """Raised when a serialized round message fails its magic or length check."""


class ConfigGeneric(FLESTGeneric):
    """A generic configuration exception, Subclassed by all other configuration exceptions."""


class ConfigError(ConfigGeneric):
    """Raised when a configuration value is missing, unknown, or out of range."""


class CheckpointGeneric(FLESTGeneric):
    """A generic checkpoint exception, Subclassed by all other checkpoint exceptions."""


class CheckpointCorrupt(CheckpointGeneric):
    """Raised when a checkpoint fails its magic, hash, or shape checks."""


class GradientCheckFailed(FLESTGeneric):
    """Raised when analytic gradients disagree with finite differences."""
