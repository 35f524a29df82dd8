"""Exception hierarchy.

Every error raised on bad input derives from :class:`ValidationError`, which
the command line maps to exit code 2.
"""


class OxdsError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(OxdsError, ValueError):
    """Input violates a documented precondition."""


class ZeroVector(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class AntipodalInputs(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class DuplicateCategory(ValidationError):
    pass


class UnknownCategory(ValidationError, KeyError):
    def __str__(self):
        return ValueError.__str__(self)


class EmptyDataset(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class MissingMapper(ValidationError):
    pass


class EmptyGallery(ValidationError):
    pass


class NoRelevantItems(ValidationError):
    pass


class InconsistentLabels(ValidationError):
    pass


class RankDeficient(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class WidthMismatch(ValidationError):
    pass


class InfeasibleSeparation(ValidationError):
    pass


class MissingDomain(ValidationError):
    pass


class MissingModel(ValidationError):
    pass


class UnknownMetric(ValidationError):
    pass


class InsufficientSupport(ValidationError):
    pass
