"""
Error hierarchy for cupmem.

DomainError subclasses map to CLI exit status 1, EnvironmentFault subclasses
to exit status 2.
"""
from typing import Optional


class CupmemError(Exception):
    """Base class for every error raised by cupmem"""
    exit_code = 1


class DomainError(CupmemError):
    """A domain invariant or precondition was violated"""
    exit_code = 1


class EnvironmentFault(CupmemError):
    """The environment (files, network) failed us"""
    exit_code = 2


# Schema
class SchemaParseError(DomainError):
    pass


class SchemaValidationError(DomainError):
    pass


class UnknownDomain(DomainError):
    pass


class UnknownSlot(DomainError):
    pass


# Store
class SingleSlotOccupied(DomainError):
    pass


class TemporalCausalityViolation(DomainError):
    pass


class AlreadyStale(DomainError):
    pass


class UnknownItem(DomainError):
    pass


class ActiveItemPresent(DomainError):
    pass


class InvalidItemState(DomainError):
    pass


class SchemaVersionMismatch(DomainError):
    pass


class IoError(EnvironmentFault):
    """A file could not be read or written. Carries the byte offset of the failure when known."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class StoreIoError(IoError):
    """Snapshot could not be read or written"""


# Write pipeline
class ExtractorFailure(DomainError):
    pass


class OutOfOrderSession(DomainError):
    def __init__(self, session_id: str, message: str):
        self.session_id = session_id
        super().__init__(message)


# Readout
class MalformedProbe(DomainError):
    pass


# Simulator
class GenerationExhausted(DomainError):
    pass


class PoolTooSmall(DomainError):
    pass


class UnsafeDistractor(DomainError):
    def __init__(self, session_id: str, message: str):
        self.session_id = session_id
        super().__init__(message)


class InfeasibleSchedule(DomainError):
    pass


class InvalidGapSpec(DomainError):
    pass


class SystemFault(DomainError):
    """A system under evaluation raised while ingesting or answering"""

    def __init__(self, scenario_id: str, message: str):
        self.scenario_id = scenario_id
        super().__init__(f"{scenario_id}: {message}")


class ConfigError(DomainError):
    pass
