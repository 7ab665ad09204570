"""Small convolutional network stack with hand-written backpropagation.

Tensors are numpy arrays shaped ``(batch, channels, height, width)``.  Every
layer's ``forward`` returns ``(out, cache)`` and ``backward(cache, grad_out)``
returns the input gradient while accumulating parameter gradients into
``layer.grads``.  Convolutions are 3x3, stride 1, zero padding 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KERNEL = 3


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B*H*W, C*9)`` patch matrix for same-padded 3x3 windows."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, H, W, C, KERNEL, KERNEL), dtype=x.dtype)
    for k in range(KERNEL):
        for l in range(KERNEL):
            cols[..., k, l] = xp[:, :, k:k + H, l:l + W].transpose(0, 2, 3, 1)
    return cols.reshape(B * H * W, C * KERNEL * KERNEL)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    B, C, H, W = shape
    cols = cols.reshape(B, H, W, C, KERNEL, KERNEL)
    xp = np.zeros((B, C, H + 2, W + 2), dtype=cols.dtype)
    for k in range(KERNEL):
        for l in range(KERNEL):
            xp[:, :, k:k + H, l:l + W] += cols[..., k, l].transpose(0, 3, 1, 2)
    return xp[:, :, 1:-1, 1:-1]


class Layer:
    """Parameter/buffer bookkeeping shared by all layers."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def named_parameters(self, prefix: str = ""):
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_tensors(self, prefix: str = ""):
        """All state tensors, parameters and buffers interleaved per layer."""
        for name, p in self.params.items():
            yield prefix + name, p
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_tensors(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g[...] = 0


class ConvLayer(Layer):
    def __init__(self, in_channels: int, out_channels: int, rng=None,
                 dtype=np.float32, slope: float = 0.01):
        self.in_channels, self.out_channels = in_channels, out_channels
        rng = np.random.default_rng(rng)
        fan_in = in_channels * KERNEL * KERNEL
        bound = math.sqrt(2.0 / (1.0 + slope**2)) * math.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, (out_channels, in_channels, KERNEL, KERNEL))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_channels, dtype)}
        self.buffers = {}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def weight(self) -> np.ndarray:
        return self.params["weight"]

    @property
    def bias(self) -> np.ndarray:
        return self.params["bias"]

    def forward(self, x, training=False):
        return conv_forward(self, x), x

    def backward(self, x, grad_out):
        gx, gw, gb = conv_backward(self, x, grad_out)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx


def conv_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ValueError(f"expected (B, {layer.in_channels}, H, W) input, got {x.shape}")
    B, _, H, W = x.shape
    x = x.astype(layer.weight.dtype, copy=False)
    wmat = layer.weight.reshape(layer.out_channels, -1)
    out = _im2col(x) @ wmat.T + layer.bias
    return np.ascontiguousarray(out.reshape(B, H, W, -1).transpose(0, 3, 1, 2))


def conv_backward(layer: ConvLayer, x: np.ndarray, grad_out: np.ndarray):
    B, _, H, W = x.shape
    if grad_out.shape != (B, layer.out_channels, H, W):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output")
    x = x.astype(layer.weight.dtype, copy=False)
    g = grad_out.astype(layer.weight.dtype, copy=False).transpose(0, 2, 3, 1)
    g = g.reshape(-1, layer.out_channels)
    wmat = layer.weight.reshape(layer.out_channels, -1)
    grad_w = (g.T @ _im2col(x)).reshape(layer.weight.shape)
    grad_b = g.sum(axis=0)
    grad_x = _col2im(g @ wmat, x.shape)
    return grad_x, grad_w, grad_b


class BatchNormLayer(Layer):
    """Per-channel batch normalization.

    Running statistics start at mean 0 / variance 1 and are updated as
    ``running = momentum * running + (1 - momentum) * batch``; the running
    variance uses the unbiased batch estimate.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float32):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype),
                        "running_var": np.ones(channels, dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, training=False):
        out, cache = batchnorm_forward(self, x, training)
        return out, cache

    def backward(self, cache, grad_out):
        gx, gg, gb = batchnorm_backward(self, cache, grad_out)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx


def batchnorm_forward(layer: BatchNormLayer, x: np.ndarray, training: bool):
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise ValueError(f"expected (B, {layer.channels}, H, W) input, got {x.shape}")
    dtype = layer.params["gamma"].dtype
    x = x.astype(dtype, copy=False)
    gamma = layer.params["gamma"][None, :, None, None]
    beta = layer.params["beta"][None, :, None, None]
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ValueError("batch norm in training mode needs >= 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        mom = layer.momentum
        rm, rv = layer.buffers["running_mean"], layer.buffers["running_var"]
        rm[...] = mom * rm + (1 - mom) * mean
        rv[...] = mom * rv + (1 - mom) * var * (m / (m - 1))
    else:
        rv = layer.buffers["running_var"]
        if np.any(rv <= 0):
            raise RuntimeError("batch norm running variance is uninitialized")
        mean, var = layer.buffers["running_mean"], rv
    inv_std = (1.0 / np.sqrt(var + layer.eps)).astype(dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return gamma * xhat + beta, (xhat, inv_std, training)


def batchnorm_backward(layer: BatchNormLayer, cache, grad_out: np.ndarray):
    xhat, inv_std, training = cache
    gamma = layer.params["gamma"]
    grad_out = grad_out.astype(gamma.dtype, copy=False)
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if not training:
        return grad_out * scale, grad_gamma, grad_beta
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    mean_g = (grad_beta / m)[None, :, None, None]
    mean_gx = (grad_gamma / m)[None, :, None, None]
    return scale * (grad_out - mean_g - xhat * mean_gx), grad_gamma, grad_beta


def leaky_relu(x: np.ndarray, alpha: float = 0.01) -> np.ndarray:
    return np.where(x > 0, x, alpha * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, alpha: float = 0.01) -> np.ndarray:
    return np.where(x > 0, grad_out, alpha * grad_out)


class ResidualBlock(Layer):
    """``LeakyReLU(x + BN(conv2(LeakyReLU(conv1(x)))))``."""

    def __init__(self, channels: int, rng, dtype=np.float32, slope=0.01, bn_momentum=0.9):
        self.slope = slope
        self.conv1 = ConvLayer(channels, channels, rng, dtype, slope)
        self.conv2 = ConvLayer(channels, channels, rng, dtype, slope)
        self.bn = BatchNormLayer(channels, bn_momentum, dtype=dtype)
        self.params, self.buffers, self.grads = {}, {}, {}

    def children(self):
        return [("conv1", self.conv1), ("conv2", self.conv2), ("bn", self.bn)]

    def forward(self, x, training=False):
        h1, c1 = self.conv1.forward(x)
        a1 = leaky_relu(h1, self.slope)
        h2, c2 = self.conv2.forward(a1)
        b, cb = self.bn.forward(h2, training)
        s = x + b
        return leaky_relu(s, self.slope), (c1, h1, c2, cb, s)

    def backward(self, cache, grad_out):
        c1, h1, c2, cb, s = cache
        gs = leaky_relu_backward(s, grad_out, self.slope)
        gh2 = self.bn.backward(cb, gs)
        ga1 = self.conv2.backward(c2, gh2)
        gh1 = leaky_relu_backward(h1, ga1, self.slope)
        return gs + self.conv1.backward(c1, gh1)


class ResNetOperator(Layer):
    """Image-to-image residual network: 1->C lift, residual blocks, C->1 projection."""

    def __init__(self, channels: int = 32, n_res_blocks: int = 2, slope: float = 0.01,
                 bn_momentum: float = 0.9, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        self.channels, self.slope = channels, slope
        self.lift = ConvLayer(1, channels, rng, dtype, slope)
        self.blocks = [ResidualBlock(channels, rng, dtype, slope, bn_momentum)
                       for _ in range(n_res_blocks)]
        self.project = ConvLayer(channels, 1, rng, dtype, slope)
        self.params, self.buffers, self.grads = {}, {}, {}

    def children(self):
        out = [("lift", self.lift)]
        out += [(f"res{i}", b) for i, b in enumerate(self.blocks)]
        out.append(("project", self.project))
        return out

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, N, N) input, got {x.shape}")
        h, c_lift = self.lift.forward(x)
        caches = []
        for block in self.blocks:
            h, c = block.forward(h, training)
            caches.append(c)
        out, c_proj = self.project.forward(h)
        return out, (c_lift, caches, c_proj)

    def backward(self, cache, grad_out):
        c_lift, caches, c_proj = cache
        g = self.project.backward(c_proj, grad_out)
        for block, c in zip(reversed(self.blocks), reversed(caches)):
            g = block.backward(c, g)
        return self.lift.backward(c_lift, g)


def resnet_apply(op: ResNetOperator, x: np.ndarray, training: bool = False) -> np.ndarray:
    return op.forward(x, training)[0]


def mse_loss(pred: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all pixels (and batch entries) with its gradient."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    diff = pred - truth
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> AdamState:
    """One in-place Adam update of ``params``; moments are created on first use."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state
