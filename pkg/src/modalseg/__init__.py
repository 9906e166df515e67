"""Multi-modal semantic segmentation at desk scale.

Pure-numpy training stack: a tape-based tensor engine, a shared-weight
hierarchical encoder, similarity-ranked modality selection with channel and
spatial feature rectification, and an exhaustive modality-subset evaluation
harness over a synthetic scene generator.
"""

__version__ = "0.1.0"

from .tensor import NonFiniteError, Tape, Tensor, TensorError, backward, no_grad

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "TensorError",
    "backward",
    "no_grad",
    "__version__",
]
