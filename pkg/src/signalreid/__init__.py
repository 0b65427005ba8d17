"""Selective interaction and global-local alignment for tri-modal re-identification.

Everything runs on the small float64 autodiff library in :mod:`signalreid.tensor`.
"""

from .config import RunConfig
from .tensor import Tensor, backward, no_grad

__all__ = ["RunConfig", "Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
