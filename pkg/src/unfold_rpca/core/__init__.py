from .errors import ConfigMismatchError, NumericalError, ShapeError, UnfoldRpcaError
from .layers import BatchNormParams, ConvBlock, ConvLayerParams, batch_norm, conv2d
from .optim import AdamState, MissingGradientError, adam_step, poly_lr
from .serialize import decode_tensor, encode_tensor, read_container, write_container
from .tensor import Tensor, no_grad, relu, sigmoid, tensor

__all__ = [
    "AdamState",
    "BatchNormParams",
    "ConfigMismatchError",
    "ConvBlock",
    "ConvLayerParams",
    "MissingGradientError",
    "NumericalError",
    "ShapeError",
    "Tensor",
    "UnfoldRpcaError",
    "adam_step",
    "batch_norm",
    "conv2d",
    "decode_tensor",
    "encode_tensor",
    "no_grad",
    "poly_lr",
    "read_container",
    "relu",
    "sigmoid",
    "tensor",
    "write_container",
]
