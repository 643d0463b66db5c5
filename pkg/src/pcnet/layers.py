"""Runtime layer objects: ops bound to their weights, with per-call caches.

A layer's ``forward`` returns (output, cache); ``backward_input`` turns an
output gradient into an input gradient using that cache, and trainable
layers additionally expose ``param_grads`` and named ``params``.  Caches are
plain tuples owned by the caller, so a layer object itself is stateless and
safe to share across threads.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .ops import LayerWeights, Tensor


class Conv:
    kind = "conv"

    def __init__(self, weights: LayerWeights):
        self.weights = weights

    def out_shape(self, in_shape):
        co, ci, kh, kw = self.weights.kernel.shape
        if in_shape[0] != ci:
            raise ops.ShapeError(f"conv expects {ci} channels, got {in_shape[0]}")
        ho = ops._conv_out_extent(in_shape[1], kh, self.weights.stride, self.weights.padding, "H")
        wo = ops._conv_out_extent(in_shape[2], kw, self.weights.stride, self.weights.padding, "W")
        return (co, ho, wo)

    def forward(self, x: Tensor):
        return ops.conv2d(x, self.weights), x

    def backward_input(self, cache, grad_out: Tensor) -> Tensor:
        gi, _, _ = ops.conv2d_backward(cache, self.weights, grad_out)
        return gi

    def param_grads(self, cache, grad_out: Tensor):
        _, gk, gb = ops.conv2d_backward(cache, self.weights, grad_out)
        return {"kernel": gk, "bias": gb}

    def backward(self, cache, grad_out: Tensor):
        gi, gk, gb = ops.conv2d_backward(cache, self.weights, grad_out)
        return gi, {"kernel": gk, "bias": gb}

    def params(self):
        return {"kernel": self.weights.kernel, "bias": self.weights.bias}


class Deconv:
    kind = "deconv"

    def __init__(self, weights: LayerWeights):
        self.weights = weights

    def out_shape(self, in_shape):
        co = self.weights.kernel.shape[0]
        if in_shape[0] != co:
            raise ops.ShapeError(f"deconv expects {co} channels, got {in_shape[0]}")
        return ops.deconv2d_out_shape(in_shape, self.weights)

    def forward(self, x: Tensor):
        return ops.deconv2d(x, self.weights), x

    def backward_input(self, cache, grad_out: Tensor) -> Tensor:
        gi, _, _ = ops.deconv2d_backward(cache, self.weights, grad_out)
        return gi

    def param_grads(self, cache, grad_out: Tensor):
        _, gk, gb = ops.deconv2d_backward(cache, self.weights, grad_out)
        return {"kernel": gk, "bias": gb}

    def backward(self, cache, grad_out: Tensor):
        gi, gk, gb = ops.deconv2d_backward(cache, self.weights, grad_out)
        return gi, {"kernel": gk, "bias": gb}

    def params(self):
        return {"kernel": self.weights.kernel, "bias": self.weights.bias}


class Relu:
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x: Tensor):
        return ops.relu(x), x

    def backward_input(self, cache, grad_out: Tensor) -> Tensor:
        return ops.relu_backward(cache, grad_out)


class MaxPool2:
    kind = "maxpool2"

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ops.ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x: Tensor):
        y, idx = ops.maxpool2(x)
        return y, (idx, x.shape)

    def backward_input(self, cache, grad_out: Tensor) -> Tensor:
        idx, in_shape = cache
        return ops.maxpool2_backward(idx, grad_out, in_shape)


class Upsample:
    kind = "upsample"

    def __init__(self, factor: int):
        if factor < 1:
            raise ops.ShapeError(f"upsample factor must be >= 1, got {factor}")
        self.factor = factor

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h * self.factor, w * self.factor)

    def forward(self, x: Tensor):
        return ops.upsample_nearest(x, self.factor), None

    def backward_input(self, cache, grad_out: Tensor) -> Tensor:
        return ops.upsample_backward(grad_out, self.factor)


class Flatten:
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x: Tensor):
        return x.reshape(x.shape[0], -1), x.shape

    def backward_input(self, cache, grad_out: Tensor) -> Tensor:
        return grad_out.reshape(cache)


class Dense:
    kind = "dense"

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = ops.as_f32(weight)
        self.bias = ops.as_f32(bias)

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.weight.shape[1]:
            raise ops.ShapeError(
                f"dense expects input width {self.weight.shape[1]}, got {in_shape}"
            )
        return (self.weight.shape[0],)

    def forward(self, x: Tensor):
        return ops.dense(x, self.weight, self.bias), x

    def backward_input(self, cache, grad_out: Tensor) -> Tensor:
        gi, _, _ = ops.dense_backward(cache, self.weight, grad_out)
        return gi

    def param_grads(self, cache, grad_out: Tensor):
        _, gw, gb = ops.dense_backward(cache, self.weight, grad_out)
        return {"kernel": gw, "bias": gb}

    def backward(self, cache, grad_out: Tensor):
        gi, gw, gb = ops.dense_backward(cache, self.weight, grad_out)
        return gi, {"kernel": gw, "bias": gb}

    def params(self):
        return {"kernel": self.weight, "bias": self.bias}


def run_layers(layers, x: Tensor) -> Tensor:
    """Forward through a layer list, discarding caches."""
    for layer in layers:
        x, _ = layer.forward(x)
    return x


def forward_with_caches(layers, x: Tensor):
    """Forward through a layer list, keeping each layer's backward cache."""
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def backward_input_chain(layers, caches, grad_out: Tensor) -> Tensor:
    """Chain ``backward_input`` through the list, last layer first."""
    g = grad_out
    for layer, cache in zip(reversed(layers), reversed(caches)):
        g = layer.backward_input(cache, g)
    return g


def propagate_shape(layers, in_shape):
    """Per-sample shape after each layer; raises ShapeError on mismatch."""
    shapes = [tuple(in_shape)]
    for layer in layers:
        shapes.append(tuple(layer.out_shape(shapes[-1])))
    return shapes
