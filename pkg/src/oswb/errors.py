"""Exception hierarchy for the workbench.

Every error class carries a distinct process exit code so the CLI can map
failures to documented, machine-checkable statuses (see README).
"""

from __future__ import annotations


class WorkbenchError(Exception):
    """Base class for all workbench errors."""

    exit_code = 1


# --- file formats / parsing ------------------------------------------------

class BadMagic(WorkbenchError):
    exit_code = 10


class TruncatedFile(WorkbenchError):
    exit_code = 11

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class DimMismatch(WorkbenchError):
    exit_code = 12

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteValue(WorkbenchError):
    exit_code = 13


class DuplicateImageId(WorkbenchError):
    exit_code = 14


class ParseError(WorkbenchError):
    exit_code = 15

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


# --- vectors and grids -----------------------------------------------------

class ZeroVector(WorkbenchError):
    exit_code = 20


class EmptyGrid(WorkbenchError):
    exit_code = 21


class EmptyJoin(WorkbenchError):
    exit_code = 22


# --- probes ------------------------------------------------------------------

class EmptyTrainSet(WorkbenchError):
    exit_code = 30


class SingularSystem(WorkbenchError):
    exit_code = 31


class DegeneratePrediction(WorkbenchError):
    exit_code = 32


class SplitOverlap(WorkbenchError):
    exit_code = 33


# --- co-location -------------------------------------------------------------

class DegenerateDirectionMean(WorkbenchError):
    exit_code = 40


# --- detection ---------------------------------------------------------------

class EmptyEvaluation(WorkbenchError):
    exit_code = 50


# --- pruning -----------------------------------------------------------------

class TargetTooLarge(WorkbenchError):
    exit_code = 60


class EmptySelection(WorkbenchError):
    exit_code = 61


# --- similarity maps ---------------------------------------------------------

class RefOutOfBounds(WorkbenchError):
    exit_code = 70


class DegenerateRange(WorkbenchError):
    exit_code = 71


# --- metrics / manifests -------------------------------------------------------

class LengthMismatch(WorkbenchError):
    exit_code = 80


class EmptyInput(WorkbenchError):
    exit_code = 81


class InvariantViolation(WorkbenchError):
    exit_code = 82

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
