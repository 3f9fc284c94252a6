"""Desk-scale global-local object detector on a hand-rolled autodiff core."""

from .tensor import Tensor, Tape, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "no_grad", "__version__"]
