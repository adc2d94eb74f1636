"""Exception hierarchy shared across the package."""


class PremirError(Exception):
    """Base class for all package errors."""


class CorpusError(PremirError):
    pass


class DuplicateIdError(CorpusError):
    pass


class ConfigError(PremirError):
    pass


class GatewayError(PremirError):
    """A model call failed after exhausting retries."""


class TransportError(GatewayError):
    pass


class GenerationError(GatewayError):
    """Model output could not be parsed into questions.

    The last raw output is kept on ``raw_output`` for debugging.
    """

    def __init__(self, message, raw_output=None):
        super().__init__(message)
        self.raw_output = raw_output


class RankingError(GatewayError):
    def __init__(self, message, raw_output=None):
        super().__init__(message)
        self.raw_output = raw_output


class VectorIndexError(PremirError):
    pass


class DimensionMismatchError(VectorIndexError):
    pass


class ArtifactMissingError(PremirError):
    """An upstream pipeline artifact is absent (e.g. index before generate)."""
