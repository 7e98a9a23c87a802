"""Exception hierarchy shared by every stage of the package."""


class PigmentError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(PigmentError, ValueError):
    pass


class ConfigurationError(PigmentError, ValueError):
    pass


class DomainError(PigmentError, ValueError):
    pass


class DegenerateBatchError(PigmentError, ValueError):
    pass


class InvalidInputError(PigmentError, ValueError):
    pass


class InternalConsistencyError(PigmentError, RuntimeError):
    pass


class EvaluationError(PigmentError, ArithmeticError):
    pass


class TrainingDivergenceError(PigmentError, RuntimeError):
    """Raised when a gradient or the loss stops being finite.

    ``tensor`` names the offending parameter when known.
    """

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class ImageFormatError(PigmentError, ValueError):
    pass


class ModelFormatError(PigmentError, ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class LengthMismatchError(ModelFormatError):
    pass
