"""Exception hierarchy shared by all subsystems."""

from __future__ import annotations


class CnqfError(Exception):
    """Base class for every error raised by this package."""


class ParseError(CnqfError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)


class ValidationError(CnqfError, ValueError):
    pass


# topology
class UnknownElement(CnqfError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class UnknownLink(CnqfError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class NoPath(CnqfError):
    pass


# policy
class PolicyError(CnqfError, ValueError):
    pass


class PolicySyntaxError(PolicyError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicatePolicyId(PolicyError):
    pass


class UnknownActionKind(PolicyError):
    pass


class BadActionParams(PolicyError):
    pass


# resource management
class ScopeError(CnqfError):
    pass


class CapacityViolation(CnqfError):
    pass


class DuplicateAllocation(CnqfError):
    pass


class UnknownSession(CnqfError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class UnmappedClass(CnqfError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class BadParams(CnqfError, ValueError):
    pass


class IllegalState(CnqfError):
    pass


class IllegalTransition(IllegalState):
    def __init__(self, state: str, event: str):
        self.state = state
        self.event = event
        super().__init__(f"illegal transition: event {event!r} in state {state}")


# monitoring
class UnknownTarget(CnqfError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class UnresolvedScope(CnqfError):
    pass


# context / adaptation
class NoFeasibleCodec(CnqfError):
    pass


class AdaptationFailed(CnqfError):
    pass


# harness
class UnknownEntity(CnqfError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class EngineIdle(CnqfError):
    """Raised by ``Engine.step`` when the event queue is empty."""


class AssertionFailure(CnqfError):
    """A scenario milestone assertion did not hold."""
