"""Meta-guided multi-modal training for incomplete multimodal segmentation."""

from .tensor import Tensor, Tape, no_grad, apply_primitive, grad_check

__all__ = ["Tensor", "Tape", "no_grad", "apply_primitive", "grad_check"]
__version__ = "0.1.0"
