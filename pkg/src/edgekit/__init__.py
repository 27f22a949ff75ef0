"""Two-stage transformer edge detector, training loop, and evaluation bench."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, fresh_tape, no_grad  # noqa: F401
