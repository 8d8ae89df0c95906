"""Multi-stage action-capsule network for skeleton action recognition."""

__version__ = "0.1.0"

from .autodiff import DiffTensor, Tape, backward, finite_difference_check, tensor

__all__ = [
    "DiffTensor",
    "Tape",
    "backward",
    "finite_difference_check",
    "tensor",
    "__version__",
]
