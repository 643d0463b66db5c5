"""Dense f32 layer primitives: forward passes plus hand-written backwards.

Everything operates on plain ``numpy`` arrays in NCHW layout ("Tensor" below
means a float32 ndarray of rank 1..4).  There is no autograd tape: each
primitive exposes its own exact analytic backward, which is all the
recurrent dynamics ever need.

Conventions, fixed once and tested:
  - "convolution" is cross-correlation (no kernel flip);
  - a kernel array is shaped (c_out, c_in, kH, kW); ``conv2d`` maps
    c_in -> c_out channels and ``deconv2d`` with the *same* kernel is its
    exact transpose as a linear map, c_out -> c_in;
  - maxpool tie-break is the first maximum in row-major window order;
  - the ReLU subgradient at exactly 0 is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


def as_f32(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float32)


@dataclass
class LayerWeights:
    """Kernel + bias + geometry for conv2d/deconv2d.

    ``kernel`` is (c_out, c_in, kH, kW).  For conv2d the bias has length
    c_out; for deconv2d (which maps c_out -> c_in) it has length c_in.
    """

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.kernel = as_f32(self.kernel)
        self.bias = as_f32(self.bias)
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got shape {self.kernel.shape}")
        if min(self.kernel.shape) < 1:
            raise ShapeError(f"kernel extents must all be >= 1, got {self.kernel.shape}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0 or self.padding >= min(self.kernel.shape[2:]):
            raise ShapeError(
                f"padding must satisfy 0 <= padding < kernel extent, got "
                f"padding={self.padding} for kernel {self.kernel.shape[2:]}"
            )


def _check_image(x: Tensor, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be (N, C, H, W), got shape {x.shape}")


def _im2col(x: Tensor, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> Tensor:
    """(N, C, H, W) -> (N, C*kh*kw, ho*wo) patch matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: Tensor, x_shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> Tensor:
    """Adjoint of ``_im2col``: scatter-add patches back to (N, C, H, W)."""
    n, c, h, w = x_shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def _conv_out_extent(extent: int, k: int, stride: int, pad: int, name: str) -> int:
    span = extent + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d output {name} extent ({extent} + 2*{pad} - {k})/{stride} + 1 "
            "is not a positive integer"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: LayerWeights) -> Tensor:
    """Cross-correlation of ``x`` (N, c_in, H, W) with bias, stride, zero pad."""
    _check_image(x)
    co, ci, kh, kw = w.kernel.shape
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, kernel expects {ci}")
    if len(w.bias) != co:
        raise ShapeError(f"conv2d bias length {len(w.bias)} != c_out {co}")
    ho = _conv_out_extent(x.shape[2], kh, w.stride, w.padding, "H")
    wo = _conv_out_extent(x.shape[3], kw, w.stride, w.padding, "W")
    cols = _im2col(x, kh, kw, w.stride, w.padding, ho, wo)
    k2 = w.kernel.reshape(co, ci * kh * kw)
    y = np.matmul(k2, cols).reshape(x.shape[0], co, ho, wo)
    return y + w.bias.reshape(1, co, 1, 1)


def conv2d_backward(x: Tensor, w: LayerWeights, grad_out: Tensor):
    """Gradients of a scalar loss wrt input, kernel, bias given d loss/d out."""
    co, ci, kh, kw = w.kernel.shape
    n, _, ho, wo = grad_out.shape
    k2 = w.kernel.reshape(co, ci * kh * kw)
    g2 = grad_out.reshape(n, co, ho * wo)
    cols = _im2col(x, kh, kw, w.stride, w.padding, ho, wo)
    grad_kernel = np.einsum("nop,nkp->ok", g2, cols, optimize=True).reshape(w.kernel.shape)
    grad_cols = np.matmul(k2.T, g2)
    grad_input = _col2im(grad_cols, x.shape, kh, kw, w.stride, w.padding, ho, wo)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_input, grad_kernel.astype(np.float32), grad_bias.astype(np.float32)


def deconv2d_out_shape(in_shape, w: LayerWeights):
    """(c_in_role, H', W') output shape of deconv2d for input ``in_shape``."""
    co, ci, kh, kw = w.kernel.shape
    ho = (in_shape[1] - 1) * w.stride - 2 * w.padding + kh
    wo = (in_shape[2] - 1) * w.stride - 2 * w.padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"deconv2d output extent ({ho}, {wo}) must be >= 1")
    return (ci, ho, wo)


def deconv2d(x: Tensor, w: LayerWeights) -> Tensor:
    """Transpose of ``conv2d`` as a linear map (plus bias on the c_in side).

    ``x`` is (N, c_out, H, W); the result is (N, c_in, H', W') with
    H' = (H-1)*stride - 2*pad + kH.
    """
    _check_image(x)
    co, ci, kh, kw = w.kernel.shape
    if x.shape[1] != co:
        raise ShapeError(f"deconv2d input has {x.shape[1]} channels, kernel expects {co}")
    if len(w.bias) != ci:
        raise ShapeError(f"deconv2d bias length {len(w.bias)} != c_in {ci}")
    _, ho, wo = deconv2d_out_shape(x.shape[1:], w)
    n, _, h, w_in = x.shape
    k2 = w.kernel.reshape(co, ci * kh * kw)
    cols = np.matmul(k2.T, x.reshape(n, co, h * w_in))
    y = _col2im(cols, (n, ci, ho, wo), kh, kw, w.stride, w.padding, h, w_in)
    return y + w.bias.reshape(1, ci, 1, 1)


def deconv2d_backward(x: Tensor, w: LayerWeights, grad_out: Tensor):
    """Backward of ``deconv2d``; the input gradient is a plain conv2d."""
    co, ci, kh, kw = w.kernel.shape
    n, _, h, w_in = x.shape
    unbiased = LayerWeights(w.kernel, np.zeros(co, dtype=np.float32), w.stride, w.padding)
    grad_input = conv2d(grad_out, unbiased)
    gcols = _im2col(grad_out, kh, kw, w.stride, w.padding, h, w_in)
    x2 = x.reshape(n, co, h * w_in)
    grad_kernel = np.einsum("nop,nkp->ok", x2, gcols, optimize=True).reshape(w.kernel.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_input, grad_kernel.astype(np.float32), grad_bias.astype(np.float32)


def maxpool2(x: Tensor):
    """2x2 non-overlapping max, plus argmax indices for routing the backward.

    Indices are in {0..3}, the row-major position inside each window; ties
    resolve to the first maximum.
    """
    _check_image(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    windows = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx.astype(np.int8)


def maxpool2_backward(idx: Tensor, grad_out: Tensor, in_shape) -> Tensor:
    """Route each output gradient to its argmax position."""
    n, c, h, w = in_shape
    windows = np.zeros((n, c, h // 2, w // 2, 4), dtype=np.float32)
    np.put_along_axis(windows, idx[..., None].astype(np.int64), grad_out[..., None], axis=-1)
    return np.ascontiguousarray(
        windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(in_shape)
    )


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel ``factor`` x ``factor`` times."""
    _check_image(x)
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_backward(grad_out: Tensor, factor: int) -> Tensor:
    """Sum each ``factor`` x ``factor`` block back onto its source pixel."""
    if factor == 1:
        return grad_out
    n, c, h, w = grad_out.shape
    return np.ascontiguousarray(
        grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))
    )


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(pre_activation: Tensor, grad_out: Tensor) -> Tensor:
    return np.where(pre_activation > 0, grad_out, 0.0).astype(np.float32)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on flattened samples; ``weight`` is (out, in)."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"dense input width {flat.shape[1]} != weight column count {weight.shape[1]}"
        )
    if weight.shape[0] != len(bias):
        raise ShapeError(f"dense bias length {len(bias)} != weight row count {weight.shape[0]}")
    return flat @ weight.T + bias


def dense_backward(x: Tensor, weight: Tensor, grad_out: Tensor):
    flat = x.reshape(x.shape[0], -1)
    grad_input = (grad_out @ weight).reshape(x.shape)
    grad_weight = grad_out.T @ flat
    grad_bias = grad_out.sum(axis=0)
    return (
        grad_input.astype(np.float32),
        grad_weight.astype(np.float32),
        grad_bias.astype(np.float32),
    )


def softmax(logits: Tensor) -> Tensor:
    """Max-shifted softmax along the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target):
    """Mean cross-entropy and its gradient wrt the logits.

    ``logits`` is (k,) with an integer target, or (N, k) with N integer
    targets; the loss averages over the batch and the returned gradient is
    of that mean.
    """
    single = logits.ndim == 1
    lg = logits[None, :] if single else logits
    tg = np.atleast_1d(np.asarray(target, dtype=np.int64))
    k = lg.shape[1]
    if tg.min() < 0 or tg.max() >= k:
        raise ShapeError(f"target class out of range for {k} classes: {tg.min()}..{tg.max()}")
    p = softmax(lg.astype(np.float64))
    n = lg.shape[0]
    losses = -np.log(np.maximum(p[np.arange(n), tg], 1e-45))
    grad = p
    grad[np.arange(n), tg] -= 1.0
    grad /= n
    grad = grad.astype(np.float32)
    return float(losses.mean()), (grad[0] if single else grad)


def cross_entropy_per_sample(logits: Tensor, targets: Tensor) -> Tensor:
    """Per-sample cross-entropy (f64) for metric accumulation."""
    p = softmax(logits.astype(np.float64))
    n = logits.shape[0]
    return -np.log(np.maximum(p[np.arange(n), np.asarray(targets, dtype=np.int64)], 1e-45))


def mse(a: Tensor, b: Tensor) -> float:
    """Mean squared difference over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse operands must share a shape, got {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def sample_mse(a: Tensor, b: Tensor) -> Tensor:
    """Per-sample mean squared difference over (C, H, W), shape (N,)."""
    if a.shape != b.shape:
        raise ShapeError(f"sample_mse operands must share a shape, got {a.shape} vs {b.shape}")
    d = (a - b).reshape(a.shape[0], -1).astype(np.float64)
    return np.mean(d * d, axis=1)
