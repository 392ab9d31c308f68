"""Exception hierarchy shared across the toolkit.

Three branches matter for CLI exit codes: UsageError (1), DataError (2),
TransportError (3). Everything else derives from OptExitError.
"""

from __future__ import annotations


class OptExitError(Exception):
    pass


class UsageError(OptExitError):
    pass


class DataError(OptExitError):
    pass


class TransportError(OptExitError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


# --- trace files and binary formats ---

class MissingFile(DataError):
    pass


class SchemaError(DataError):
    def __init__(self, line: int, field: str, message: str = ""):
        detail = message or "invalid value"
        super().__init__(f"line {line}, field {field!r}: {detail}")
        self.line = line
        self.field = field


class DuplicateTraceId(DataError):
    pass


class UnverifiedAnswer(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


class EmptyThinkRegion(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class RowCountMismatch(DataError):
    def __init__(self, expected: int, found: int):
        super().__init__(f"expected {expected} rows, found {found}")
        self.expected = expected
        self.found = found


class NonFiniteValue(DataError):
    def __init__(self, row: int, col: int):
        super().__init__(f"non-finite value at row {row}, col {col}")
        self.row = row
        self.col = col


# --- gateway / mock server ---

class Timeout(TransportError):
    pass


class MalformedResponse(TransportError):
    pass


class PortInUse(OptExitError):
    pass


class ScriptAmbiguity(DataError):
    pass


# --- analysis ---

class EmptyTopK(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class TooFewPoints(DataError):
    pass


# --- curation ---

class EmptySolution(DataError):
    pass


class LlmRefusal(DataError):
    pass


class RetriesExhausted(DataError):
    def __init__(self, max_retries: int, rejected_spans: list[str]):
        super().__init__(
            f"no verified span after {max_retries} attempts "
            f"({len(rejected_spans)} rejected)"
        )
        self.max_retries = max_retries
        self.rejected_spans = rejected_spans


class BelowThreshold(DataError):
    def __init__(self, best_score: float):
        super().__init__(f"best fuzzy score {best_score:.4f} below threshold")
        self.best_score = best_score


class SpanNotFound(DataError):
    def __init__(self, best_score: float):
        super().__init__(f"span not located (best fuzzy score {best_score:.4f})")
        self.best_score = best_score


class OutOfRange(DataError):
    pass


class AllFailed(DataError):
    pass


# --- probe ---

class MissingClass(DataError):
    pass


class EmptyMask(DataError):
    pass


class NonFiniteLoss(DataError):
    pass


class Diverged(DataError):
    pass


class DimMismatch(DataError):
    pass


# --- exit controller / baselines ---

class SteppedAfterExit(OptExitError):
    pass


class FeatureUnavailable(UsageError):
    pass


class MissingLogprobs(DataError):
    pass


class TemplateError(DataError):
    pass


# --- reporting ---

class EmptyResults(DataError):
    pass


class MixedDatasets(DataError):
    pass
