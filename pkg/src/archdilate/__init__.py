"""Architecture dilation for adversarial robustness, on a small numpy autodiff engine."""
from . import tensor, nn, attacks, supernet, flops, admm, bounds

__all__ = ["tensor", "nn", "attacks", "supernet", "flops", "admm", "bounds"]
__version__ = "0.1.0"
