# Copyright (c) 2025 Softwell Srl, Milano, Italy
# SPDX-License-Identifier: Apache-2.0
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Differentiable operations on :class:`~genro_vad.autodiff.tensor.Tensor`.

Convolutions use NCHW activations and ``(F, C, kh, kw)`` kernels. Both the
forward convolution and its transpose go through the same im2col/col2im
pair, so the transposed convolution is the exact adjoint of the forward one
for matching geometry.

Image resizing is bilinear with half-pixel centres and is expressed as two
small resize matrices, ``out = Ry @ x @ Rx.T``; the same matrices are used
by the non-differentiable helpers (:func:`resize_array`).
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import expit

from ..exceptions import DimensionError, VadConfigError
from .tensor import Tensor, as_tensor, get_dtype, normalize_axis

__all__ = [
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "square",
    "softmax",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "bilinear_resize",
    "resize_matrix",
    "resize_array",
    "conv_output_size",
    "mse",
    "kl_diag_gaussian",
]


def add(a: Tensor, b: Tensor) -> Tensor:
    return as_tensor(a) + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    return as_tensor(a) - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    return as_tensor(a) * b


def div(a: Tensor, b: Tensor) -> Tensor:
    return as_tensor(a) / b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


# ---------------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor.from_op(x.data * scale, (x,), "leaky_relu", lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor.from_op(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor.from_op(t, (x,), "tanh", lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return Tensor.from_op(e, (x,), "exp", lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    data = x.data
    return Tensor.from_op(np.log(data), (x,), "log", lambda g: (g / data,))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    return Tensor.from_op(r, (x,), "sqrt", lambda g: (g * 0.5 / r,))


def square(x: Tensor) -> Tensor:
    data = x.data
    return Tensor.from_op(data * data, (x,), "square", lambda g: (2.0 * g * data,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    axis = normalize_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (x,), "softmax", backward)


# ---------------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = normalize_axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(
                f"concat shape mismatch on axis {axis}: {[x.shape for x in tensors]}"
            )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g: np.ndarray) -> list[np.ndarray]:
        grads = []
        for start, stop in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * ndim
            index[axis] = slice(int(start), int(stop))
            grads.append(g[tuple(index)])
        return grads

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(data, tuple(tensors), "concat", backward)


# ---------------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output extent of a strided convolution.

    Raises:
        VadConfigError: If the geometry does not divide exactly
        DimensionError: If the kernel does not fit the padded input
    """
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError(
            f"Kernel {kernel} larger than padded input {size + 2 * padding}"
        )
    if stride < 1 or span % stride != 0:
        raise VadConfigError(
            f"Convolution geometry not exact: size={size} kernel={kernel} "
            f"stride={stride} padding={padding}"
        )
    return span // stride + 1


def _im2col(
    xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int
) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, out_h, out_w, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            window = xp[
                :, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride
            ]
            cols[:, :, :, :, i, j] = window.transpose(0, 2, 3, 1)
    return cols.reshape(n * out_h * out_w, c * kh * kw)


def _col2im(
    cols: np.ndarray,
    shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int,
    out_h: int,
    out_w: int,
) -> np.ndarray:
    n, c, hp, wp = shape
    blocks = cols.reshape(n, out_h, out_w, c, kh, kw)
    image = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            image[
                :, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride
            ] += blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return image


def _crop(image: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return image
    return image[:, :, padding:-padding, padding:-padding]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (F,C,kh,kw).

    Zero padding is applied symmetrically. The output is (N,F,H',W') with
    ``H' = (H + 2*padding - kh) / stride + 1``.

    Raises:
        DimensionError: On rank or channel mismatch
        VadConfigError: If the output size is not an exact division

    Examples:
        >>> x = Tensor(np.ones((1, 1, 4, 4)))
        >>> k = Tensor(np.ones((1, 1, 3, 3)))
        >>> conv2d(x, k, stride=1, padding=1).shape
        (1, 1, 4, 4)
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d needs NCHW input and FCkk kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    out_h = conv_output_size(h, kh, stride, padding)
    out_w = conv_output_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    k_mat = kernel.data.reshape(f, -1)
    out = (cols @ k_mat.T).reshape(n, out_h, out_w, f).transpose(0, 3, 1, 2)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        grad_kernel = (g_mat.T @ cols).reshape(kernel.shape)
        grad_cols = g_mat @ k_mat
        grad_x = _col2im(grad_cols, xp.shape, kh, kw, stride, out_h, out_w)
        return _crop(grad_x, padding), grad_kernel

    return Tensor.from_op(np.ascontiguousarray(out), (x, kernel), "conv2d", backward)


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``x`` is (N,F,Hi,Wi) and ``kernel`` is (F,C,kh,kw), the same kernel
    layout a forward convolution from C to F channels would use. The output
    is (N,C,H,W) with ``H = (Hi - 1) * stride - 2 * padding + kh``.

    Raises:
        DimensionError: On rank or channel mismatch
        VadConfigError: If the output size is not positive
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d_transpose needs NCHW input and FCkk kernel, got {x.shape}, {kernel.shape}"
        )
    n, f, in_h, in_w = x.shape
    kf, c, kh, kw = kernel.shape
    if kf != f:
        raise DimensionError(f"conv2d_transpose channel mismatch: input has {f}, kernel expects {kf}")
    out_h = (in_h - 1) * stride - 2 * padding + kh
    out_w = (in_w - 1) * stride - 2 * padding + kw
    if out_h <= 0 or out_w <= 0 or stride < 1:
        raise VadConfigError(
            f"Transposed convolution output not positive: {out_h}x{out_w} "
            f"(kernel={kh}, stride={stride}, padding={padding})"
        )

    padded_shape = (n, c, out_h + 2 * padding, out_w + 2 * padding)
    x_mat = x.data.transpose(0, 2, 3, 1).reshape(-1, f)
    k_mat = kernel.data.reshape(f, -1)
    image = _col2im(x_mat @ k_mat, padded_shape, kh, kw, stride, in_h, in_w)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(gp, kh, kw, stride, in_h, in_w)
        grad_x = (cols @ k_mat.T).reshape(n, in_h, in_w, f).transpose(0, 3, 1, 2)
        grad_kernel = (x_mat.T @ cols).reshape(kernel.shape)
        return grad_x, grad_kernel

    return Tensor.from_op(
        np.ascontiguousarray(_crop(image, padding)), (x, kernel), "conv2d_transpose", backward
    )


# ---------------------------------------------------------------------- resizing


@lru_cache(maxsize=256)
def _resize_matrix64(out_size: int, in_size: int) -> np.ndarray:
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), in_size - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    matrix.setflags(write=False)
    return matrix


def resize_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Bilinear interpolation matrix of shape (out_size, in_size).

    Rows sum to one; ``resize_matrix(n, n)`` is the identity.
    """
    if out_size < 1 or in_size < 1:
        raise DimensionError(f"Resize sizes must be positive, got {out_size} from {in_size}")
    return _resize_matrix64(int(out_size), int(in_size))


def resize_array(array: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize the last two axes of ``array`` to (height, width), keeping dtype."""
    ry = resize_matrix(height, array.shape[-2]).astype(array.dtype, copy=False)
    rx = resize_matrix(width, array.shape[-1]).astype(array.dtype, copy=False)
    return np.matmul(np.matmul(ry, array), rx.T)


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    """Differentiable bilinear resize of the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"bilinear_resize needs at least 2 axes, got {x.shape}")
    dtype = get_dtype()
    ry = resize_matrix(height, x.shape[-2]).astype(dtype)
    rx = resize_matrix(width, x.shape[-1]).astype(dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return Tensor.from_op(
        out, (x,), "bilinear_resize", lambda g: (np.matmul(np.matmul(ry.T, g), rx),)
    )


# ---------------------------------------------------------------------- losses


def mse(prediction: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean squared error over all elements."""
    target = as_tensor(target)
    if prediction.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {prediction.shape} vs {target.shape}")
    diff = prediction - target
    return square(diff).mean()


def kl_diag_gaussian(
    mu: Tensor,
    logvar: Tensor,
    mu0: Tensor | None = None,
    logvar0: Tensor | None = None,
    reduction: str = "mean",
) -> Tensor:
    """KL( N(mu, exp(logvar)) || N(mu0, exp(logvar0)) ) for diagonal Gaussians.

    With ``mu0``/``logvar0`` omitted the reference is the standard normal.
    Inputs are (N, D); the divergence is summed over D, then reduced over N
    according to ``reduction`` (``mean``, ``sum`` or ``none``).
    """
    if reduction not in ("mean", "sum", "none"):
        raise VadConfigError(f"Unknown reduction '{reduction}'")
    if mu.shape != logvar.shape:
        raise DimensionError(f"kl shape mismatch: {mu.shape} vs {logvar.shape}")
    if mu0 is None:
        mu0 = Tensor(np.zeros(mu.shape))
    if logvar0 is None:
        logvar0 = Tensor(np.zeros(mu.shape))

    per_dim = (logvar0 - logvar + exp(logvar - logvar0) + square(mu - mu0) * exp(-logvar0) - 1.0)
    per_sample = (per_dim * 0.5).sum(axis=-1)
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "sum":
        return per_sample.sum()
    return per_sample
