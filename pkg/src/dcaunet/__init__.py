"""Differential cross-attention segmentation network on a NumPy autodiff engine."""

from .dca import DcaConfig, DifferentialCrossAttention, attention_flops, lambda_init, summarize_windows
from .net import DCAUNet, NetworkConfig
from .tensor import Tensor, default_dtype, no_grad, set_default_dtype

__version__ = "0.1.0"

__all__ = [
    "DCAUNet",
    "DcaConfig",
    "DifferentialCrossAttention",
    "NetworkConfig",
    "Tensor",
    "attention_flops",
    "default_dtype",
    "lambda_init",
    "no_grad",
    "set_default_dtype",
    "summarize_windows",
    "__version__",
]
