"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 2 (argparse),
DataError and subclasses exit 3, protocol/training/runtime errors exit 4.
"""


class FedngdbError(Exception):
    """Base class for all package errors."""


class DataError(FedngdbError):
    """Bad input data: files, tokens, configuration values."""


class TripleParseError(DataError):
    """A triple file line does not have exactly three tab-separated fields."""

    def __init__(self, path, line_no, line):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: expected 3 tab-separated fields, got {line!r}")


class VocabularyError(DataError):
    """Unknown token under a frozen vocabulary, or an id lookup miss."""


class ConfigError(DataError):
    """Invalid or inconsistent configuration."""


class SamplingError(DataError):
    """Query sampling exhausted its attempt budget."""

    def __init__(self, message, achieved=0, samples=None):
        self.achieved = achieved
        self.samples = samples if samples is not None else []
        super().__init__(message)


class ProtocolError(FedngdbError):
    """Secure-aggregation protocol violation: bad public values, missing
    mask shares, shape mismatches, failed authentication."""


class TrainingError(FedngdbError):
    """A training round aborted; carries the failing round index."""

    def __init__(self, message, round_index=None):
        self.round_index = round_index
        super().__init__(message)


class NumericError(FedngdbError):
    """Non-finite loss or a shape mismatch inside numeric code."""


class RetrievalError(FedngdbError):
    """Query planning or plan execution failure."""


class EvaluationError(FedngdbError):
    """A benchmark sample cannot be evaluated (e.g. no novel answers)."""
