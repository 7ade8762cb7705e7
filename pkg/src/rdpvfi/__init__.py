"""Region-distinguishable priors and region-aware feature fusion for VFI."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, ShapeError, NonDifferentiablePointError, grad_check

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonDifferentiablePointError",
    "grad_check",
    "__version__",
]
