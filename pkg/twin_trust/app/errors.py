"""Exception hierarchy for twin-trust.

Every error raised on purpose by the engines derives from ``TwinTrustError`` so
callers (the CLI in particular) can map failures to exit codes in one place.
"""
from typing import List, Optional, Sequence


class TwinTrustError(Exception):
    """Base class for all twin-trust errors."""


class ParseError(TwinTrustError):
    """A document could not be parsed; ``location`` points at the offending spot."""

    def __init__(self, location: str, message: str):
        self.location = location
        self.message = message
        super().__init__(f"{location}: {message}")


class TwinValidationError(TwinTrustError):
    """A parsed Digital Twin carries an FSM that fails validation."""

    def __init__(self, report):  # report: ValidationReport
        self.report = report
        lines = "; ".join(v.message for v in report.violations)
        super().__init__(f"invalid FSM: {lines}")


class CatalogSchemaError(TwinTrustError):
    """The hazard-analysis catalog does not match the catalog schema."""


class DanglingReferenceError(TwinTrustError):
    """Catalog entries reference ids that do not exist."""

    def __init__(self, broken: Sequence[str]):
        self.broken: List[str] = list(broken)
        super().__init__("dangling references: " + "; ".join(self.broken))


class UnknownStateError(TwinTrustError):
    """A state id is not part of the FSM."""

    def __init__(self, state_id: str):
        self.state_id = state_id
        super().__init__(f"unknown state '{state_id}'")


class InvalidInputError(TwinTrustError):
    """Arguments outside an operation's domain."""


class WeightSumError(TwinTrustError):
    """Trust combination weights are negative or do not sum to 1."""


class NoEvidenceError(TwinTrustError):
    """A reputation report was requested for a subject with no evaluated window."""

    def __init__(self, subject_id: str):
        self.subject_id = subject_id
        super().__init__(f"no evidence recorded for '{subject_id}'")


class IdMismatchError(TwinTrustError):
    """Twin and trace belong to different drones."""

    def __init__(self, twin_id: str, trace_id: str):
        self.twin_id = twin_id
        self.trace_id = trace_id
        super().__init__(f"twin '{twin_id}' does not match trace '{trace_id}'")


class UnknownDroneError(TwinTrustError):
    """A report or dispatch references a drone the orchestrator does not know."""

    def __init__(self, drone_id: str):
        self.drone_id = drone_id
        super().__init__(f"unknown drone '{drone_id}'")


class InvalidScenarioError(TwinTrustError):
    """Scenario failed validation; ``problems`` lists every issue found."""

    def __init__(self, problems: Sequence[str], path: Optional[str] = None):
        self.problems: List[str] = list(problems)
        self.path = path
        prefix = f"{path}: " if path else ""
        super().__init__(prefix + "invalid scenario: " + "; ".join(self.problems))


class SimulationError(TwinTrustError):
    """An agent failed while the simulation was running."""
