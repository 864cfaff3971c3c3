"""Exception hierarchy shared across the toolkit."""


class ProtostError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(ProtostError):
    """Input values violate a documented precondition (non-finite data,
    out-of-range thresholds, unknown class ids, ...)."""


class ShapeError(ValidationError):
    """Dimension or resolution mismatch between paired inputs."""


class FormatError(ProtostError):
    """A file does not follow its documented layout (bad magic, bad header)."""


class VersionError(FormatError):
    """A file carries an unsupported schema version."""


class LengthError(FormatError):
    """A file payload is shorter or longer than its header promises."""


class EmptyInputError(ProtostError):
    """An operation that needs at least one element received none."""


class InsufficientDataError(ProtostError):
    """Too few samples for the requested number of clusters/components."""


class EmptyModelError(ProtostError):
    """A model with no usable per-class components was built or queried."""


class ConfigError(ValidationError):
    """Pipeline configuration is invalid.

    Carries the full list of offending fields so one run surfaces every
    problem at once.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))


class PrerequisiteError(ProtostError):
    """A pipeline command is missing an artifact another command produces."""

    def __init__(self, missing, producer):
        self.missing = missing
        self.producer = producer
        super().__init__(
            f"missing prerequisite {missing!r}: run {producer!r} first"
        )


class NumericError(ProtostError):
    """A computation produced non-finite values or violated a numeric
    invariant (e.g. a decreasing likelihood during fitting)."""
