"""Dynamic decomposed MLP-mixer segmentation network.

A small numpy-backed tensor core with tape-recorded reverse-mode gradients,
the decomposed/channel mixer module with its two dynamic fusion mechanisms,
a 4-stage U-shaped encoder-decoder built from mixer blocks, the Dice +
cross-entropy training recipe, and surface-distance evaluation metrics.
"""

from .tensor import ShapeError, Tape, Tensor, backward, load_d2t, save_d2t
from . import ops
from .gradcheck import gradcheck

__version__ = "0.1.0"

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "gradcheck",
    "load_d2t",
    "save_d2t",
    "ops",
]
