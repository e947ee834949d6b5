"""Self-supervised pre-training for change detection in multitemporal image pairs."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DegenerateInputError, NumericalError, SslcdError
from .tensor import Tensor, no_grad

__all__ = [
    "__version__",
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "NumericalError",
    "SslcdError",
    "Tensor",
    "no_grad",
]
