"""Desk-scale MoE language-model training and router-balancing analysis."""

from .tensor import Graph, Tensor, set_default_dtype

__all__ = ["Graph", "Tensor", "set_default_dtype"]
__version__ = "0.1.0"
