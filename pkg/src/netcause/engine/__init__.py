from . import autodiff, nn, optim
from .autodiff import (NonFinite, NonScalarRoot, ShapeMismatch, Tensor, parameter)
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .optim import Adam, AdamState, adam_step

__all__ = ["autodiff", "nn", "optim", "Tensor", "parameter", "NonFinite", "NonScalarRoot",
           "ShapeMismatch", "Adam", "AdamState", "adam_step", "save_checkpoint",
           "load_checkpoint", "restore"]
