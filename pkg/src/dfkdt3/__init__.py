"""Desk-scale data-free knowledge distillation by text-to-text transfer."""

from .compute import RngStream, Tensor, no_grad

__all__ = ["Tensor", "RngStream", "no_grad"]
__version__ = "0.1.0"
