"""Reverse-mode autodiff with double backward, and the layer set used by the networks."""

from pathscape.engine.functional import (
    DegenerateBatchError, batchnorm, conv, log_softmax, relu, softmax, softmax_cross_entropy,
)
from pathscape.engine.network import Network, Parameter, init
from pathscape.engine.tensor import Tensor, backward, enable_grad, grad, no_grad

__all__ = [
    "DegenerateBatchError", "Network", "Parameter", "Tensor", "backward", "batchnorm", "conv",
    "enable_grad", "grad", "init", "log_softmax", "no_grad", "relu", "softmax", "softmax_cross_entropy",
]
