"""Contrastive multiview coding for RGB and multispectral image chips."""

from . import contrastive, data, nn, optim, tensor, transfer, views
from .tensor import Tensor, no_grad, precision, set_precision

__all__ = [
    "Tensor",
    "contrastive",
    "data",
    "nn",
    "no_grad",
    "optim",
    "precision",
    "set_precision",
    "tensor",
    "transfer",
    "views",
]

__version__ = "0.1.0"
