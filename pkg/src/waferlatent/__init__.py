"""Semi-supervised wafer-map defect classification guided by VAE latent vectors."""

from .errors import InvalidArgumentError, NonFiniteError, ParseError
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = ["InvalidArgumentError", "NonFiniteError", "ParseError", "Tensor", "backward"]
