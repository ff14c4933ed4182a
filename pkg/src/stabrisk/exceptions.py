"""Exception hierarchy shared by every stage of the toolkit."""


class StabriskError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(StabriskError, ValueError):
    """Invalid configuration value or combination."""


class DataError(StabriskError, ValueError):
    """Input data violates a structural or domain invariant."""


class ParseError(DataError):
    """A prediction or cohort file row could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class AlignmentError(DataError):
    """Runs in a RunSet do not share the same (patient, month) keys."""


class ConsistencyError(DataError):
    """Runs disagree on labels or attributes for the same key."""


class TrainingError(StabriskError, ValueError):
    """Training data cannot support a fit (e.g. a single class)."""


class SpecError(StabriskError, ValueError):
    """Ensemble specification does not match the available runs."""


class StageError(StabriskError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
