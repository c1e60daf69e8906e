"""Forward and backward rules for every kernel the model uses.

Forward functions are pure. Backward functions take the upstream gradient and
the forward inputs, add parameter gradients into ``Parameter.gradient`` and
return the gradient with respect to the tensor input.
"""

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import ShapeError
from numkernel.schemas import ActivationKind, Parameter, Tensor


def as_tensor(values) -> Tensor:
    """Copy anything array-like into a float64 tensor."""
    return np.array(values, dtype=np.float64)


def _check_conv_shapes(x: Tensor, kernels: Parameter, bias: Parameter, op: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{op}: input must be steps x channels, got shape {x.shape}")
    if kernels.value.ndim != 3:
        raise ShapeError(
            f"{op}: kernels must be width x in_ch x out_ch, got {kernels.shape}"
        )
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels but kernels expect "
            f"{kernels.shape[1]} (kernels shape {kernels.shape})"
        )
    if bias.shape != (kernels.shape[2],):
        raise ShapeError(
            f"{op}: bias shape {bias.shape} does not match {kernels.shape[2]} "
            "output channels"
        )
    if x.shape[0] < 1:
        raise ShapeError(f"{op}: input needs at least one step")


def _windows(x: Tensor, width: int, left_pad: int) -> Tensor:
    """Zero-padded sliding windows, shape steps x channels x width."""
    padded = np.pad(x, ((left_pad, width - 1 - left_pad), (0, 0)))
    return sliding_window_view(padded, width, axis=0)


def _correlate(x: Tensor, w: Tensor, left_pad: int) -> Tensor:
    """out[t, o] = sum_{j,c} x[t + j - left_pad, c] * w[j, c, o]."""
    win = _windows(x, w.shape[0], left_pad)
    return np.tensordot(win, w, axes=([2, 1], [0, 1]))


def _correlate_backward(
    grad: Tensor, x: Tensor, w: Tensor, left_pad: int
) -> Tuple[Tensor, Tensor]:
    width = w.shape[0]
    win = _windows(x, width, left_pad)
    grad_w = np.tensordot(win, grad, axes=([0], [0])).transpose(1, 0, 2)
    w_adjoint = w[::-1].transpose(0, 2, 1)
    grad_x = _correlate(grad, w_adjoint, width - 1 - left_pad)
    return grad_x, grad_w


# --------------------
# Convolutions
# --------------------
def conv1d(x: Tensor, kernels: Parameter, bias: Parameter) -> Tensor:
    """Stride-1 convolution with same-zero padding; odd kernel widths only."""
    _check_conv_shapes(x, kernels, bias, "conv1d")
    width = kernels.shape[0]
    if width % 2 == 0:
        raise ShapeError(f"conv1d: kernel width must be odd, got {width}")
    return _correlate(x, kernels.value, (width - 1) // 2) + bias.value


def conv1d_backward(
    grad: Tensor, x: Tensor, kernels: Parameter, bias: Parameter
) -> Tensor:
    width = kernels.shape[0]
    grad_x, grad_w = _correlate_backward(grad, x, kernels.value, (width - 1) // 2)
    kernels.gradient += grad_w
    bias.gradient += grad.sum(axis=0)
    return grad_x


def _transposed_layout(x: Tensor, kernels: Parameter, stride: int):
    width = kernels.shape[0]
    dilated = np.zeros((x.shape[0] * stride, x.shape[1]), dtype=np.float64)
    dilated[::stride] = x
    # adjoint of y[s] = sum_j x[stride*s + j - p] w[j] with p = (width - 1) // 2
    left_pad = width - 1 - (width - 1) // 2
    return dilated, kernels.value[::-1], left_pad


def transposed_conv1d(
    x: Tensor, kernels: Parameter, bias: Parameter, stride: int = 2
) -> Tensor:
    """Upsampling convolution; output length is exactly stride * steps."""
    _check_conv_shapes(x, kernels, bias, "transposed_conv1d")
    dilated, flipped, left_pad = _transposed_layout(x, kernels, stride)
    return _correlate(dilated, flipped, left_pad) + bias.value


def transposed_conv1d_backward(
    grad: Tensor, x: Tensor, kernels: Parameter, bias: Parameter, stride: int = 2
) -> Tensor:
    dilated, flipped, left_pad = _transposed_layout(x, kernels, stride)
    grad_dilated, grad_flipped = _correlate_backward(grad, dilated, flipped, left_pad)
    kernels.gradient += grad_flipped[::-1]
    bias.gradient += grad.sum(axis=0)
    return grad_dilated[::stride]


# --------------------
# Pooling
# --------------------
def maxpool1d(x: Tensor, window: int = 2, stride: int = 2) -> Tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling; returns the output and in-window argmax."""
    if window != stride:
        raise ShapeError("maxpool1d: only non-overlapping windows are supported")
    steps, channels = x.shape
    if steps % window:
        raise ShapeError(f"maxpool1d: {steps} steps not divisible by window {window}")
    blocks = x.reshape(steps // window, window, channels)
    argmax = blocks.argmax(axis=1)  # first maximum on ties
    out = np.take_along_axis(blocks, argmax[:, None, :], axis=1)[:, 0, :]
    return out, argmax


def maxpool1d_backward(grad: Tensor, argmax: np.ndarray, window: int = 2) -> Tensor:
    pooled, channels = grad.shape
    grad_blocks = np.zeros((pooled, window, channels), dtype=np.float64)
    np.put_along_axis(grad_blocks, argmax[:, None, :], grad[:, None, :], axis=1)
    return grad_blocks.reshape(pooled * window, channels)


# --------------------
# Dense
# --------------------
def dense(x: Tensor, weight: Parameter, bias: Optional[Parameter] = None) -> Tensor:
    """out = x W^T + b over the last axis (a single vector or one row per position)."""
    if weight.value.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"dense: input last dimension {x.shape[-1]} does not match weight "
            f"shape {weight.shape}"
        )
    out = x @ weight.value.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(
                f"dense: bias shape {bias.shape} does not match weight {weight.shape}"
            )
        out = out + bias.value
    return out


def dense_backward(
    grad: Tensor, x: Tensor, weight: Parameter, bias: Optional[Parameter] = None
) -> Tensor:
    rows_out = grad.reshape(-1, weight.shape[0])
    rows_in = x.reshape(-1, weight.shape[1])
    weight.gradient += rows_out.T @ rows_in
    if bias is not None:
        bias.gradient += rows_out.sum(axis=0)
    return grad @ weight.value


# --------------------
# Elementwise and reductions
# --------------------
def activation(x: Tensor, kind: ActivationKind) -> Tensor:
    kind = ActivationKind(kind)
    if kind is ActivationKind.relu:
        return np.maximum(x, 0.0)
    if kind is ActivationKind.sigmoid:
        return expit(x)
    return np.tanh(x)


def activation_backward(
    grad: Tensor, x: Tensor, out: Tensor, kind: ActivationKind
) -> Tensor:
    kind = ActivationKind(kind)
    if kind is ActivationKind.relu:
        return grad * (x > 0.0)  # subgradient 0 at 0
    if kind is ActivationKind.sigmoid:
        return grad * out * (1.0 - out)
    return grad * (1.0 - out * out)


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_axis_backward(grad: Tensor, out: Tensor, axis: int = -1) -> Tensor:
    return out * (grad - (grad * out).sum(axis=axis, keepdims=True))


def reduce_mean_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"reduce_mean_axis: axis {axis} out of range for rank {x.ndim}")
    return x.mean(axis=axis)


def reduce_mean_axis_backward(
    grad: Tensor, input_shape: Tuple[int, ...], axis: int
) -> Tensor:
    expanded = np.expand_dims(grad, axis)
    return np.broadcast_to(expanded, input_shape) / input_shape[axis]
