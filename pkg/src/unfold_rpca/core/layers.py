"""3x3 convolution and batch normalization on ``Tensor``, with parameter holders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor

KERNEL = 3
PAD = 1
# im2col buffers up to this size are kept for the weight gradient instead of rebuilt
SAVE_COLS_BYTES = 32 * 2**20


@dataclass
class ConvLayerParams:
    """Weight ``(out, in, 3, 3)`` and bias ``(out,)`` of a stride-1, pad-1 convolution."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 4 or w[2:] != (KERNEL, KERNEL):
            raise ShapeError(f"conv weight must be (out, in, 3, 3), got {w}")
        if self.bias.shape != (w[0],):
            raise ShapeError(f"conv bias must be ({w[0]},), got {self.bias.shape}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def kaiming(cls, in_channels: int, out_channels: int, rng: np.random.Generator):
        fan_in = in_channels * KERNEL * KERNEL
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, KERNEL, KERNEL))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_channels), requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class BatchNormParams:
    """
    Per-channel affine parameters plus running statistics.

    ``momentum`` weights the old running value:
    ``running = momentum * running + (1 - momentum) * batch_stat``.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, epsilon: float = 1e-5):
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def _im2col(padded: np.ndarray, height: int, width: int) -> np.ndarray:
    # (N, C, H+2, W+2) -> (N, C*9, H*W), row order (c, ky, kx) to match weight.reshape
    n, c = padded.shape[:2]
    windows = sliding_window_view(padded, (KERNEL, KERNEL), axis=(2, 3))
    return windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * KERNEL * KERNEL, height * width)


def conv2d(x: Tensor, params: ConvLayerParams) -> Tensor:
    """
    Cross-correlate ``x`` (N, Cin, H, W) with a 3x3 kernel bank, zero padding 1.

    Returns a tensor of shape (N, Cout, H, W).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D (N, C, H, W) input, got shape {x.shape}")
    n, cin, h, w = x.shape
    if cin != params.in_channels:
        raise ShapeError(
            f"conv2d input has {cin} channels but the kernel expects {params.in_channels}"
        )
    if h < 1 or w < 1 or n < 1:
        raise ShapeError(f"conv2d got an empty input of shape {x.shape}")
    cout = params.out_channels
    weight, bias = params.weight, params.bias

    padded = np.pad(x.data, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    w_mat = weight.data.reshape(cout, cin * KERNEL * KERNEL)
    cols = _im2col(padded, h, w)
    out = np.matmul(w_mat, cols)
    out += bias.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, h, w)
    saved_cols = cols if cols.nbytes <= SAVE_COLS_BYTES else None
    del cols

    def backward(g):
        g_flat = g.reshape(n, cout, h * w)
        grad_x = grad_w = grad_b = None
        if x.requires_grad:
            # input gradient = correlation of the padded output gradient with the
            # channel-swapped, spatially flipped kernel
            flipped = weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1].reshape(cin, cout * KERNEL * KERNEL)
            g_pad = np.pad(g, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
            grad_x = np.matmul(flipped, _im2col(g_pad, h, w)).reshape(n, cin, h, w)
        if weight.requires_grad:
            cols_w = saved_cols if saved_cols is not None else _im2col(padded, h, w)
            grad_w = np.matmul(g_flat, cols_w.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias.requires_grad:
            grad_b = g_flat.sum(axis=(0, 2))
        return grad_x, grad_w, grad_b

    return Tensor._from_op(out, (x, weight, bias), backward)


def batch_norm(x: Tensor, params: BatchNormParams, training: bool) -> Tensor:
    """
    Normalize each channel of ``x`` (N, C, H, W).

    In training mode the batch statistics are used and the running buffers are
    updated in place. In inference mode only the running statistics are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4-D (N, C, H, W) input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != params.channels:
        raise ShapeError(f"batch_norm input has {c} channels, parameters have {params.channels}")
    count = n * h * w
    if count == 0:
        raise ShapeError("batch_norm got a zero-size batch")

    gamma, beta = params.gamma, params.beta
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        m = params.momentum
        params.running_mean[:] = m * params.running_mean + (1.0 - m) * mean
        params.running_var[:] = m * params.running_var + (1.0 - m) * unbiased
        inv_std = 1.0 / np.sqrt(var + params.epsilon)
        x_hat = centered * inv_std.reshape(1, c, 1, 1)
        out = g4 * x_hat + b4

        def backward(g):
            grad_gamma = (g * x_hat).sum(axis=(0, 2, 3))
            grad_beta = g.sum(axis=(0, 2, 3))
            grad_x = None
            if x.requires_grad:
                g_hat = g * g4
                mean_g = g_hat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (g_hat * x_hat).mean(axis=(0, 2, 3), keepdims=True)
                grad_x = (g_hat - mean_g - x_hat * mean_gx) * inv_std.reshape(1, c, 1, 1)
            return grad_x, grad_gamma, grad_beta

    else:
        inv_std = 1.0 / np.sqrt(params.running_var + params.epsilon)
        scale = g4 * inv_std.reshape(1, c, 1, 1)
        x_hat = (x.data - params.running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = scale * x.data + (b4 - scale * params.running_mean.reshape(1, c, 1, 1))

        def backward(g):
            grad_x = g * scale if x.requires_grad else None
            return grad_x, (g * x_hat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, (x, gamma, beta), backward)


@dataclass
class ConvBlock:
    """Conv, optional batch norm, optional ReLU."""

    conv: ConvLayerParams
    norm: BatchNormParams | None = None
    activate: bool = True

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = conv2d(x, self.conv)
        if self.norm is not None:
            y = batch_norm(y, self.norm, training)
        if self.activate:
            y = y.relu()
        return y
