"""Rank-4 tensor primitives: convolution, pooling, elementwise ops.

All arrays are contiguous float64 in (batch, channel, height, width)
layout. The optimized convolution lowers patches to a column matrix and
multiplies (im2col + GEMM); `conv2d_naive` is the literal loop nest it is
forever tested against and must never be optimized.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class ConvGeometry:
    """Square odd kernel, stride >= 1, symmetric zero padding >= 0."""

    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    def out_size(self, size):
        out = (size + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise ShapeError(
                f"non-positive output size for input {size} with {self}"
            )
        return out


def as_tensor4(a, name="tensor"):
    """Coerce to a contiguous float64 rank-4 array, validating finiteness."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 4:
        raise ShapeError(f"{name} must be rank 4, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} contains non-finite values")
    return a


def _check_conv_args(x, kernels, bias, geom):
    x = as_tensor4(x, "input")
    kernels = as_tensor4(kernels, "kernels")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError(f"kernels must be square, got {kh}x{kw}")
    if kh != geom.kernel:
        raise ShapeError(f"kernel size {kh} does not match geometry {geom.kernel}")
    if x.shape[1] != c_in:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernels expect {c_in}"
        )
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    return x, kernels, bias


def _pad(x, padding):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _window_view(xp, k, stride, out_h, out_w):
    # read-only strided view (n, c, out_h, out_w, k, k); never written to
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (n, c, out_h, out_w, k, k),
        (sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )


def _im2col(xp, k, stride, out_h, out_w):
    # (n*out_h*out_w, c*k*k), rows batch-major then row-major spatial
    win = _window_view(xp, k, stride, out_h, out_w)
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * k * k)


def conv2d_forward_cols(x, kernels, bias, geom):
    """conv2d_forward that also returns the im2col patch matrix so a
    matching backward call can skip recomputing it."""
    x, kernels, bias = _check_conv_args(x, kernels, bias, geom)
    n, c_in, h, w = x.shape
    c_out, _, k, _ = kernels.shape
    out_h, out_w = geom.out_size(h), geom.out_size(w)

    cols = _im2col(_pad(x, geom.padding), k, geom.stride, out_h, out_w)
    out = cols @ kernels.reshape(c_out, -1).T + bias
    out = np.ascontiguousarray(
        out.reshape(n, out_h, out_w, c_out).transpose(0, 3, 1, 2)
    )
    return out, cols


def conv2d_forward(x, kernels, bias, geom):
    """Cross-correlation of a batch with a (c_out, c_in, k, k) kernel stack."""
    return conv2d_forward_cols(x, kernels, bias, geom)[0]


def conv2d_backward(x, kernels, geom, grad_out, need_grad_input=True, cols=None):
    """Gradients of sum(grad_out * conv2d_forward(...)) w.r.t. each argument.

    Returns (grad_input, grad_kernels, grad_bias); grad_input is None when
    need_grad_input is False (first layer of a network). Pass the cols
    matrix from conv2d_forward_cols to avoid re-extracting patches.
    """
    x = as_tensor4(x, "input")
    kernels = as_tensor4(kernels, "kernels")
    grad_out = as_tensor4(grad_out, "grad_out")
    n, c_in, h, w = x.shape
    c_out, _, k, _ = kernels.shape
    out_h, out_w = geom.out_size(h), geom.out_size(w)
    if grad_out.shape != (n, c_out, out_h, out_w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(n, c_out, out_h, out_w)}"
        )

    go_mat = grad_out.transpose(0, 2, 3, 1).reshape(-1, c_out)
    grad_bias = go_mat.sum(axis=0)

    if cols is None:
        cols = _im2col(_pad(x, geom.padding), k, geom.stride, out_h, out_w)
    grad_kernels = (go_mat.T @ cols).reshape(c_out, c_in, k, k)

    if not need_grad_input:
        return None, grad_kernels, grad_bias

    # scatter column gradients back onto the padded input (col2im)
    dcols = (go_mat @ kernels.reshape(c_out, -1)).reshape(
        n, out_h, out_w, c_in, k, k
    )
    p = geom.padding
    grad_xp = np.zeros((n, c_in, h + 2 * p, w + 2 * p))
    s = geom.stride
    for dy in range(k):
        for dx in range(k):
            grad_xp[:, :, dy : dy + s * out_h : s, dx : dx + s * out_w : s] += (
                dcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            )
    grad_input = grad_xp[:, :, p : p + h, p : p + w] if p else grad_xp
    return np.ascontiguousarray(grad_input), grad_kernels, grad_bias


def conv2d_naive(x, kernels, bias, geom):
    """Reference convolution: the most literal loop nest possible.

    Testing oracle for conv2d_forward; deliberately never optimized.
    """
    x, kernels, bias = _check_conv_args(x, kernels, bias, geom)
    n, c_in, h, w = x.shape
    c_out, _, k, _ = kernels.shape
    out_h, out_w = geom.out_size(h), geom.out_size(w)
    xp = _pad(x, geom.padding)
    out = np.zeros((n, c_out, out_h, out_w))
    for b in range(n):
        for o in range(c_out):
            for y in range(out_h):
                for xo in range(out_w):
                    acc = bias[o]
                    for i in range(c_in):
                        for dy in range(k):
                            for dx in range(k):
                                acc += (
                                    xp[b, i, y * geom.stride + dy, xo * geom.stride + dx]
                                    * kernels[o, i, dy, dx]
                                )
                    out[b, o, y, xo] = acc
    return out


def maxpool2d(x, window, stride):
    """Max pooling; returns (output, argmax) with argmax holding the flat
    (h*w) position of each winner for backward routing.

    Ties break to the first position in row-major scan order.
    """
    x = as_tensor4(x, "input")
    if window < 1:
        raise ShapeError(f"window must be >= 1, got {window}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"window {window} larger than input {h}x{w}")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1

    win = _window_view(x, window, stride, out_h, out_w)
    flat = win.reshape(n, c, out_h, out_w, window * window)
    local = flat.argmax(axis=-1)  # first max in scan order
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    dy, dx = local // window, local % window
    rows = np.arange(out_h)[None, None, :, None] * stride + dy
    cols = np.arange(out_w)[None, None, None, :] * stride + dx
    argmax = rows * w + cols
    return np.ascontiguousarray(out), argmax


def maxpool2d_backward(grad_out, argmax, input_shape):
    """Route pooled gradients back to the winning input positions."""
    grad_out = as_tensor4(grad_out, "grad_out")
    n, c, h, w = input_shape
    if grad_out.shape != argmax.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match argmax {argmax.shape}"
        )
    grad = np.zeros((n, c, h * w))
    np.add.at(
        grad,
        (
            np.arange(n)[:, None, None, None],
            np.arange(c)[None, :, None, None],
            argmax,
        ),
        grad_out,
    )
    return grad.reshape(input_shape)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    """Subgradient at 0 is defined as 0: gradient passes only where x > 0."""
    if np.shape(x) != np.shape(grad_out):
        raise ShapeError(
            f"relu backward shape mismatch: {np.shape(x)} vs {np.shape(grad_out)}"
        )
    return np.where(np.asarray(x) > 0.0, grad_out, 0.0)


def flatten(x):
    """(n, c, h, w) -> (n, c*h*w), row-major."""
    x = as_tensor4(x, "input")
    return x.reshape(x.shape[0], -1)


def unflatten(x2d, shape):
    x2d = np.asarray(x2d, dtype=np.float64)
    n, c, h, w = shape
    if x2d.shape != (n, c * h * w):
        raise ShapeError(f"cannot unflatten {x2d.shape} to {shape}")
    return x2d.reshape(shape)
