"""Feature-affinity assisted distillation for quantized networks, on numpy.

Modules: ``autodiff`` (tensors and reverse-mode gradients), ``quantizers``,
``losses``, ``ffa`` (sketched affinity loss), ``models``, ``trainer``,
``data``, ``verify`` and ``cli``.
"""

from .errors import (
    ConfigurationError,
    FAQDError,
    FormatError,
    InputError,
    ParameterError,
    ShapeError,
    StateError,
    TrainingError,
)

__version__ = "0.1.0"
