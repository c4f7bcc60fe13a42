"""Group co-saliency detection with affinity-distilled consensus, on a small numpy autodiff core."""

from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "precision", "__version__"]
