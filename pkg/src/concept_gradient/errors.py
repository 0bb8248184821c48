"""Exception hierarchy shared across the package."""


class ConceptGradientError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(ConceptGradientError, ValueError):
    """Malformed arguments: wrong shape, non-finite entries, bad index."""


class InvalidConfig(ConceptGradientError, ValueError):
    """A configuration that cannot be executed (e.g. every layer frozen)."""


class TrainingDiverged(ConceptGradientError, RuntimeError):
    """The training loss became NaN or infinite."""


class DegenerateConceptGradient(ConceptGradientError, ArithmeticError):
    """A concept gradient has zero norm, so normalized attribution is undefined."""


class DegenerateConceptVector(ConceptGradientError, ArithmeticError):
    """A concept activation vector has zero norm."""


class DegenerateLabels(ConceptGradientError, ValueError):
    """Binary labels contain a single class, so no probe can be fit."""


class IncompatibleModels(ConceptGradientError, ValueError):
    """Target and concept models do not share the frozen prefix below the attribution layer."""
