"""From-scratch 3D CNN kernel: layer primitives, the CNN stack and Adam."""

from .adam import AdamState, adam_step
from .functional import (
    BatchNormState,
    activation_backward,
    activation_forward,
    argmax_state,
    batchnorm_backward,
    batchnorm_forward,
    conv3d_backward,
    conv3d_forward,
    cross_entropy,
    cross_entropy_grad,
    fc_backward,
    fc_forward,
    maxpool_backward,
    maxpool_forward,
    softmax,
)
from .stack import Architecture, CNNStack, cnn_forward, init_parameters, truncated_normal

__all__ = [
    "AdamState",
    "adam_step",
    "BatchNormState",
    "activation_backward",
    "activation_forward",
    "argmax_state",
    "batchnorm_backward",
    "batchnorm_forward",
    "conv3d_backward",
    "conv3d_forward",
    "cross_entropy",
    "cross_entropy_grad",
    "fc_backward",
    "fc_forward",
    "maxpool_backward",
    "maxpool_forward",
    "softmax",
    "Architecture",
    "CNNStack",
    "cnn_forward",
    "init_parameters",
    "truncated_normal",
]
