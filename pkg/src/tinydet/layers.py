"""Forward and backward passes for each layer kind, and the network runner.

Batch norm always uses the stored rolling statistics, in training as well as
inference. Its backward pass therefore treats mean and variance as
constants, which keeps every gradient exact for the forward map that is
actually computed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np

from .errors import ShapeError, StateError, TinyDetError
from .netdef import (ConvLayer, ConvParams, MaxPoolLayer, ModelWeights, NetConfig,
                     RouteLayer, UpsampleLayer, YoloLayer)
from .tensor import as_tensor, col2im, gemm, im2col

BN_EPS = 1e-6
LEAKY_SLOPE = 0.1


def _dtype_of(x):
    return x.dtype if x.dtype in (np.float32, np.float64) else np.dtype(np.float32)


def activate(v, activation):
    if activation == "leaky":
        return np.where(v > 0, v, v * v.dtype.type(LEAKY_SLOPE))
    if activation == "linear":
        return v
    raise ValueError(f"unsupported activation '{activation}'")


def activation_grad(v, activation):
    if activation == "leaky":
        return np.where(v > 0, v.dtype.type(1), v.dtype.type(LEAKY_SLOPE))
    return np.ones_like(v)


# Convolution ----------------------------------------------------------------

@dataclass
class ConvCache:
    params: ConvParams
    x_shape: tuple
    cols: np.ndarray
    xhat: np.ndarray | None
    preact: np.ndarray
    stride: int
    pad: int
    activation: str


def conv_forward(x, params: ConvParams, stride=1, pad=0, activation="linear"):
    """Convolution, optional batch norm, activation.

    Returns ``(y, cache)``; ``cache`` feeds :func:`conv_backward`.
    """
    x = as_tensor(x, _dtype_of(np.asarray(x)))
    dtype = x.dtype
    out_c, in_c, k, _ = params.weights.shape
    if x.shape[1] != in_c:
        raise ShapeError(f"conv expects {in_c} input channels, got {x.shape[1]}")
    n = x.shape[0]
    cols = im2col(x, k, stride, pad)
    oh = (x.shape[2] + 2 * pad - k) // stride + 1
    ow = (x.shape[3] + 2 * pad - k) // stride + 1
    z = gemm(params.weights.reshape(out_c, -1).astype(dtype, copy=False), cols)
    xhat = None
    if params.batch_normalize:
        mean = params.rolling_mean.astype(dtype)[:, None]
        std = np.sqrt(params.rolling_variance.astype(dtype) + dtype.type(BN_EPS))[:, None]
        xhat = (z - mean) / std
        v = params.scales.astype(dtype)[:, None] * xhat + params.biases.astype(dtype)[:, None]
    else:
        v = z + params.biases.astype(dtype)[:, None]
    y = activate(v, activation)
    y = np.ascontiguousarray(y.reshape(out_c, n, oh, ow).transpose(1, 0, 2, 3))
    return y, ConvCache(params, x.shape, cols, xhat, v, stride, pad, activation)


def conv_backward(grad_out, cache: ConvCache | None):
    """Return ``(grad_in, ConvParams of gradients)``.

    Rolling mean and variance gradients are zero-filled; they are constants.
    """
    if cache is None:
        raise StateError("conv_backward called without a forward cache")
    p = cache.params
    out_c, in_c, k, _ = p.weights.shape
    dtype = cache.preact.dtype
    if grad_out.shape[1] != out_c or grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3] != cache.preact.shape[1]:
        raise ShapeError(f"conv grad_out shape {grad_out.shape} does not match forward output")
    dy = np.ascontiguousarray(grad_out, dtype=dtype).transpose(1, 0, 2, 3).reshape(out_c, -1)
    dv = dy * activation_grad(cache.preact, cache.activation)
    if p.batch_normalize:
        std = np.sqrt(p.rolling_variance.astype(dtype) + dtype.type(BN_EPS))
        d_beta = dv.sum(axis=1)
        d_gamma = (dv * cache.xhat).sum(axis=1)
        dz = dv * (p.scales.astype(dtype) / std)[:, None]
        zero = np.zeros(out_c, dtype=dtype)
        grads_bn = (d_gamma, zero, zero.copy())
    else:
        d_beta = dv.sum(axis=1)
        dz = dv
        grads_bn = ()
    d_w = gemm(dz, cache.cols.T).reshape(p.weights.shape)
    d_cols = gemm(p.weights.reshape(out_c, -1).T.astype(dtype), dz)
    dx = col2im(d_cols, cache.x_shape, k, cache.stride, cache.pad)
    return dx, ConvParams(d_w, d_beta, *grads_bn)


# Max pooling ----------------------------------------------------------------

@numba.njit(cache=True)
def _maxpool_kernel(x, size, stride, offset, out, arg):
    n, c, h, w = x.shape
    oh, ow = out.shape[2], out.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    best = -np.inf
                    best_i = -1
                    for ki in range(size):
                        iy = oy * stride + offset + ki
                        if iy < 0 or iy >= h:
                            continue
                        for kj in range(size):
                            ix = ox * stride + offset + kj
                            if ix < 0 or ix >= w:
                                continue
                            v = x[b, ch, iy, ix]
                            # strict '>' keeps the smallest flat index on ties
                            if best_i < 0 or v > best:
                                best = v
                                best_i = iy * w + ix
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = best_i


@numba.njit(cache=True)
def _maxpool_back_kernel(dy, arg, dx):
    n, c, oh, ow = dy.shape
    w = dx.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    i = arg[b, ch, oy, ox]
                    dx[b, ch, i // w, i % w] += dy[b, ch, oy, ox]


@dataclass
class PoolCache:
    x_shape: tuple
    argmax: np.ndarray


def maxpool_forward(x, size, stride, pad=None):
    """Max over ``size``x``size`` windows.

    ``pad`` is the total padding (default ``size - 1``); windows start at
    ``-pad // 2`` and padded cells act as negative infinity. Returns
    ``(y, cache)``.
    """
    x = as_tensor(x, _dtype_of(np.asarray(x)))
    if pad is None:
        pad = size - 1
    # every window must overlap the input: ceil(pad / 2) <= size - 1
    if size < 1 or stride < 1 or pad < 0 or (pad + 1) // 2 > size - 1:
        raise ShapeError(f"invalid maxpool geometry size={size} stride={stride} pad={pad}")
    n, c, h, w = x.shape
    oh = (h + pad - size) // stride + 1
    ow = (w + pad - size) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool output would be {oh}x{ow} for input {h}x{w}")
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    _maxpool_kernel(x, size, stride, -(pad // 2), out, arg)
    return out, PoolCache(x.shape, arg)


def maxpool_backward(grad_out, cache: PoolCache | None):
    if cache is None:
        raise StateError("maxpool_backward called without a forward cache")
    if grad_out.shape != cache.argmax.shape:
        raise ShapeError(f"maxpool grad_out {grad_out.shape} != output {cache.argmax.shape}")
    dx = np.zeros(cache.x_shape, dtype=_dtype_of(grad_out))
    _maxpool_back_kernel(np.ascontiguousarray(grad_out, dtype=dx.dtype), cache.argmax, dx)
    return dx


# Upsample / route -----------------------------------------------------------

def upsample_forward(x, factor):
    """Nearest-neighbour upsampling: ``y[n, c, i, j] = x[n, c, i // f, j // f]``."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    x = as_tensor(x, _dtype_of(np.asarray(x)))
    return np.ascontiguousarray(np.repeat(np.repeat(x, factor, axis=2), factor, axis=3))


def upsample_backward(grad_out, factor):
    n, c, h, w = grad_out.shape
    if h % factor or w % factor:
        raise ShapeError(f"upsample grad shape {grad_out.shape} not divisible by {factor}")
    return grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def route_forward(inputs):
    """Concatenate tensors along channels in listed order."""
    if not inputs:
        raise ShapeError("route needs at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"route inputs disagree: {ref} vs {t.shape}")
    return np.ascontiguousarray(np.concatenate(inputs, axis=1))


def route_backward(grad_out, channels):
    """Split ``grad_out`` back into per-input gradients of the given channel counts."""
    if sum(channels) != grad_out.shape[1]:
        raise ShapeError(f"route grad has {grad_out.shape[1]} channels, inputs sum to {sum(channels)}")
    bounds = np.cumsum(channels)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, bounds, axis=1)]


# Network --------------------------------------------------------------------

class Head(NamedTuple):
    output: np.ndarray
    layer: YoloLayer


class Network:
    """Runs a :class:`NetConfig` with a :class:`ModelWeights` set.

    ``forward(..., train=True)`` keeps per-layer caches so that
    :meth:`backward` can return parameter gradients.
    """

    def __init__(self, cfg: NetConfig, weights: ModelWeights):
        missing = [c.index for c in cfg.conv_layers if c.index not in weights.convs]
        if missing:
            raise ShapeError(f"weights missing conv layers {missing}")
        self.cfg = cfg
        self.weights = weights
        self._caches = None

    def forward(self, batch, train=False):
        cfg = self.cfg
        batch = np.asarray(batch)
        batch = as_tensor(batch, _dtype_of(batch))
        if batch.shape[1:] != cfg.input_shape:
            raise ShapeError(f"batch shape {batch.shape[1:]} does not match network input {cfg.input_shape}")
        outputs, caches, heads = [], [], []
        x = batch
        for node in cfg.nodes:
            try:
                x, cache = self._forward_node(node, x, outputs)
            except TinyDetError as e:
                raise type(e)(f"layer {node.index}: {e}") from e
            outputs.append(x)
            caches.append(cache if train else None)
            if isinstance(node, YoloLayer):
                heads.append(Head(x, node))
        self._caches = caches if train else None
        self._shapes = [o.shape for o in outputs]
        return heads

    def _forward_node(self, node, x, outputs):
        if isinstance(node, ConvLayer):
            return conv_forward(x, self.weights.convs[node.index], node.stride, node.pad, node.activation)
        if isinstance(node, MaxPoolLayer):
            return maxpool_forward(x, node.size, node.stride, node.padding)
        if isinstance(node, UpsampleLayer):
            return upsample_forward(x, node.stride), None
        if isinstance(node, RouteLayer):
            return route_forward([outputs[s] for s in node.sources]), None
        return x, None

    def backward(self, head_grads):
        """Back-propagate gradients of the head outputs.

        Args:
            head_grads: one array per head, in the order returned by forward.

        Returns:
            dict mapping conv layer index to a :class:`ConvParams` of gradients.
        """
        if self._caches is None:
            raise StateError("backward requires a preceding forward(train=True)")
        cfg = self.cfg
        grads = [None] * len(cfg.nodes)

        def add(i, g):
            grads[i] = g if grads[i] is None else grads[i] + g

        yolos = [n.index for n in cfg.nodes if isinstance(n, YoloLayer)]
        if len(head_grads) != len(yolos):
            raise ShapeError(f"expected {len(yolos)} head gradients, got {len(head_grads)}")
        for i, g in zip(yolos, head_grads):
            if g.shape != self._shapes[i]:
                raise ShapeError(f"head gradient {g.shape} != head shape {self._shapes[i]}")
            add(i, g)
        param_grads = {}
        for node in reversed(cfg.nodes):
            i = node.index
            g = grads[i]
            if g is None:
                continue
            if isinstance(node, ConvLayer):
                dx, param_grads[i] = conv_backward(g, self._caches[i])
                dx_list = [(i - 1, dx)]
            elif isinstance(node, MaxPoolLayer):
                dx_list = [(i - 1, maxpool_backward(g, self._caches[i]))]
            elif isinstance(node, UpsampleLayer):
                dx_list = [(i - 1, upsample_backward(g, node.stride))]
            elif isinstance(node, RouteLayer):
                parts = route_backward(g, [cfg.shapes[s][0] for s in node.sources])
                dx_list = list(zip(node.sources, parts))
            else:
                dx_list = [(i - 1, g)]
            for j, dx in dx_list:
                if j >= 0:
                    add(j, dx)
        for c in cfg.conv_layers:
            if c.index not in param_grads:
                p = self.weights.convs[c.index]
                param_grads[c.index] = ConvParams(*(None if a is None else np.zeros_like(a)
                                                    for a in (p.weights, p.biases, p.scales,
                                                              p.rolling_mean, p.rolling_variance)))
        return {i: param_grads[i] for i in sorted(param_grads)}


def forward_pass(cfg: NetConfig, weights: ModelWeights, batch):
    """Run ``batch`` through the network and return one :class:`Head` per yolo layer."""
    return Network(cfg, weights).forward(batch)
