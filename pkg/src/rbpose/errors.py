"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class FormatError(ValueError):
    """A file on disk does not match its declared binary or text format."""


class CodebookBuildError(RuntimeError):
    """The encoder failed while building a codebook."""


class InitializationError(RuntimeError):
    """The tracker could not be seeded from the first frame."""


class SequenceError(ValueError):
    """A synthetic sequence could not be generated or loaded."""
