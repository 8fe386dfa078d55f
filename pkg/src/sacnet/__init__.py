"""Self-attention augmented convolutional network toolkit."""

from .tensor import Parameter, Tensor

__all__ = ["Tensor", "Parameter"]
__version__ = "0.1.0"
