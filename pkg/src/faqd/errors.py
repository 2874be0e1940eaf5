"""Exception types shared across the package."""


class FAQDError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FAQDError):
    """Invalid configuration, unsupported primitive, or violated setup contract."""


class ShapeError(FAQDError, ValueError):
    """Operand shapes do not fit the primitive they were passed to."""


class InputError(FAQDError, ValueError):
    """Invalid argument values (NaN weights, bad labels, negative lambda, ...)."""


class StateError(FAQDError, RuntimeError):
    """Operation invoked in the wrong state, e.g. backward before forward."""


class FormatError(FAQDError, ValueError):
    """Malformed file on disk (checkpoint or dataset record)."""


class ParameterError(FAQDError, ValueError):
    """Verification suite parameters violate the hypothesis being checked."""


class TrainingError(FAQDError, RuntimeError):
    """Training diverged (NaN loss) or otherwise cannot continue."""
