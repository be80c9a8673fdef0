import enum


__all__ = (
    "Direction",
    "Split",
    "TrainingMode",
)


@enum.unique
class TrainingMode(enum.Enum):
    federated = "federated"
    """Shared parameters are averaged by the server every round."""
    local_only = "local_only"
    """Clients never exchange anything after the initial broadcast."""


@enum.unique
class Split(enum.Enum):
    train = "train"
    valid = "valid"
    test = "test"


@enum.unique
class Direction(enum.Enum):
    tail = "tail"
    """Rank every entity as the tail of (head, relation, ?)."""
    head = "head"
    """Rank every entity as the head of (?, relation, tail)."""
