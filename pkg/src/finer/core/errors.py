"""Error taxonomy shared across the toolkit.

Three top-level families map onto CLI exit codes: ConfigError (bad or
missing configuration), InputError (bad input data), PipelineError
(runtime failure while producing outputs). Everything raised by this
package derives from FinerError.
"""

from __future__ import annotations


class FinerError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FinerError):
    """Configuration file or endpoint declaration is unusable."""

    exit_code = 2


class InputError(FinerError):
    """Input data violates a documented contract."""

    exit_code = 3


class PipelineError(FinerError):
    """A pipeline stage failed at runtime."""

    exit_code = 4


class MalformedLine(InputError):
    """A JSONL line is not valid JSON."""

    def __init__(self, path: str, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: malformed JSONL line: {reason}")
        self.path = path
        self.line_no = line_no


class SchemaViolation(InputError):
    """A JSONL line parses but violates its schema's invariants."""

    def __init__(self, path: str, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: schema violation: {reason}")
        self.path = path
        self.line_no = line_no
        self.reason = reason


class EndpointError(PipelineError):
    """A chat endpoint kept failing after retries were exhausted."""


class CacheMiss(PipelineError):
    """Replay-only mode was asked for a request absent from the cache."""


class DistributionUnavailable(PipelineError):
    """Neither token scores nor sampling could produce option probabilities."""


class UnparseableLlmOutput(PipelineError):
    """Structured output from an endpoint stayed unparseable after reprompting."""


class InvalidDistribution(InputError):
    """A probability vector has negative entries or does not sum to one."""


class ProposalExhausted(PipelineError):
    """Negative proposal retries ran out before four valid candidates existed."""


class InsufficientLabels(PipelineError):
    """Threshold calibration hit a batch with unlabeled results."""

    def __init__(self, needed: list[str]):
        super().__init__(
            "calibration needs human labels for: " + ", ".join(needed)
        )
        self.needed = list(needed)


class InsufficientEntities(InputError):
    """A scene graph lacks enough entities of the requested kind."""


class MissingNegatives(InputError):
    """An entity chosen for negation has no usable negative set."""


class WrongArity(InputError):
    """An operation requires a specific entity count and did not get it."""


class MissingRotation(InputError):
    """A positional-bias group is missing one of its position variants."""


class OrphanPair(InputError):
    """A pair id lacks its positive or negative half (reported, not raised
    during scoring; scoring excludes and counts orphans instead)."""


class BatchIncomplete(FinerError):
    """The current review batch still has unlabeled tasks."""


class UnknownTask(FinerError):
    """A label referenced a result id that no task carries."""


class AlreadyLabeled(FinerError):
    """A label already exists for this result id and override was not set."""
