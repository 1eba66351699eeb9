"""Exception types raised across the package.

Each class maps onto one failure mode so callers (and the CLI exit-code
table) can dispatch on type instead of parsing messages.
"""

from __future__ import annotations


class TactileError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(TactileError, ValueError):
    pass


class MalformedLine(TactileError, ValueError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        super().__init__(f"malformed manifest line {line_no}: {reason}".rstrip(": "))


class DuplicateId(TactileError, ValueError):
    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"duplicate sample id {sample_id!r}")


class UnknownSensor(TactileError, KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown sensor {name!r}")

    def __str__(self) -> str:
        return self.args[0]


class GroupConsistency(TactileError, ValueError):
    def __init__(self, group_id: str, reason: str = "members disagree on object_id/position_id"):
        self.group_id = group_id
        super().__init__(f"group {group_id!r}: {reason}")


class NoEligibleSamples(TactileError, ValueError):
    pass


class InvalidSpec(TactileError, ValueError):
    pass


class IOFailure(TactileError, OSError):
    pass


class OutOfBounds(TactileError, ValueError):
    pass


class UnknownMaterial(TactileError, KeyError):
    def __str__(self) -> str:
        return self.args[0] if self.args else "unknown material"


class EmptyText(TactileError, ValueError):
    pass


class EmptyMask(TactileError, ValueError):
    pass


class MissingNextFrame(TactileError, ValueError):
    pass


class EmptySubset(TactileError, ValueError):
    pass


class AllSubsetsEmpty(TactileError, ValueError):
    pass


class DomainError(TactileError, ValueError):
    pass


class NumericalDivergence(TactileError, FloatingPointError):
    def __init__(self, message: str, batch_ids: list[str] | None = None):
        self.batch_ids = list(batch_ids or [])
        super().__init__(message)


class IncompatibleCheckpoint(TactileError, ValueError):
    pass


class VersionMismatch(TactileError, ValueError):
    pass


class DegenerateLabels(TactileError, ValueError):
    pass


class NoEligiblePairs(TactileError, ValueError):
    pass


class StageOrderError(TactileError, ValueError):
    pass
