"""Exception hierarchy shared by every weevilwatch module."""


class WeevilError(Exception):
    """Base class for all toolkit errors."""


class FormatError(WeevilError):
    """Input bytes or text do not follow the expected container layout."""


class UnsupportedEncodingError(FormatError):
    pass


class EmptyAudioError(FormatError):
    pass


class ValidationError(WeevilError, ValueError):
    """A value violates a documented invariant (range, label domain, ...)."""


class ConflictError(ValidationError):
    pass


class DomainError(WeevilError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InsufficientDataError(DomainError):
    pass


class DegenerateDataError(DomainError):
    pass


class ConsistencyError(WeevilError):
    """Two inputs disagree with each other (e.g. unknown device id)."""


class ConfigError(ValidationError):
    """Configuration invalid; ``problems`` lists every violation found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class StageError(WeevilError):
    """A pipeline stage failed; downstream stages were not run."""
