"""Layers with hand-written forward and backward passes.

Each layer exposes two calling styles:

* ``fwd(x, train) -> (y, cache)`` and ``bwd(cache, grad) -> grad_in`` keep the
  activations outside the layer, so one layer object can run on several
  streams (shared weights) and have its gradients summed.
* ``forward(x)`` / ``backward(grad)`` store the cache on the layer, for
  single-stream use.

Parameter gradients accumulate into ``layer.grads`` until ``zero_grad``.
"""
import numpy as np

from .. import kernels
from ..errors import ShapeError, StateError


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def fwd(self, x, train=True):
        raise NotImplementedError

    def bwd(self, cache, grad):
        raise NotImplementedError

    def forward(self, x, train=True):
        y, self._cache = self.fwd(x, train)
        return y

    def backward(self, grad):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called before forward")
        return self.bwd(self._cache, grad)

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def buffers(self):
        """Non-trainable state that must be checkpointed."""
        return {}

    def __repr__(self):
        return f"{type(self).__name__}()"


def _check_ndim(x, ndim, kind):
    if x.ndim != ndim:
        raise ShapeError(f"{kind}: expected a {ndim}-d input, got shape {x.shape}")


class Conv2d(Layer):
    """Cross-correlation over NCHW input (no kernel flip)."""

    kind = "conv"

    def __init__(self, in_ch, out_ch, k, stride=1, pad=0, rng=None, bias=True):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.pad = stride, pad
        std = np.sqrt(2.0 / (in_ch * k * k))
        self.params["W"] = rng.normal(0.0, std, size=(out_ch, in_ch, k, k))
        if bias:
            self.params["b"] = np.zeros(out_ch)
        self._init_grads()

    def output_shape(self, h, w):
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        return ho, wo

    def fwd(self, x, train=True):
        _check_ndim(x, 4, "conv")
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError(f"conv: input has {c} channels, kernel expects {self.in_ch}")
        ho, wo = self.output_shape(h, w)
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv: {self.k}x{self.k} kernel (stride {self.stride}, pad {self.pad}) "
                f"does not fit a {h}x{w} input"
            )
        s, p = self.stride, self.pad
        cols = kernels.im2col(x, self.k, self.k, s, s, p, p)
        wmat = self.params["W"].reshape(self.out_ch, -1)
        y = np.matmul(wmat, cols)
        if "b" in self.params:
            y += self.params["b"][None, :, None]
        return y.reshape(n, self.out_ch, ho, wo), (x.shape, cols)

    def bwd(self, cache, grad):
        x_shape, cols = cache
        n = grad.shape[0]
        g = grad.reshape(n, self.out_ch, -1)
        self.grads["W"] += np.einsum("nop,nkp->ok", g, cols).reshape(self.params["W"].shape)
        if "b" in self.params:
            self.grads["b"] += g.sum(axis=(0, 2))
        wmat = self.params["W"].reshape(self.out_ch, -1)
        dcols = np.matmul(wmat.T, g)
        s, p = self.stride, self.pad
        return kernels.col2im(dcols, x_shape, self.k, self.k, s, s, p, p)

    def __repr__(self):
        return f"Conv2d({self.in_ch}, {self.out_ch}, k={self.k}, stride={self.stride}, pad={self.pad})"


class ReLU(Layer):
    kind = "relu"

    def fwd(self, x, train=True):
        mask = x > 0
        return x * mask, mask

    def bwd(self, cache, grad):
        return grad * cache


class Tanh(Layer):
    kind = "tanh"

    def fwd(self, x, train=True):
        y = np.tanh(x)
        return y, y

    def bwd(self, cache, grad):
        return grad * (1.0 - cache * cache)


class BatchNorm2d(Layer):
    """Per-channel batch normalization.

    Training uses batch statistics and updates running averages with
    ``running = momentum * running + (1 - momentum) * batch``; inference uses
    the running averages.
    """

    kind = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._init_grads()

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def fwd(self, x, train=True):
        _check_ndim(x, 4, "batchnorm")
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm: expected {self.channels} channels, got {x.shape[1]}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if not train:
            mean = self.running_mean[None, :, None, None]
            inv = 1.0 / np.sqrt(self.running_var[None, :, None, None] + self.eps)
            xhat = (x - mean) * inv
            return gamma * xhat + beta, ("eval", xhat, inv)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / max(count - 1, 1)
        self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
        self.running_var = self.momentum * self.running_var + (1 - self.momentum) * unbiased
        inv = 1.0 / np.sqrt(var + self.eps)[None, :, None, None]
        xhat = (x - mean[None, :, None, None]) * inv
        return gamma * xhat + beta, ("train", xhat, inv)

    def bwd(self, cache, grad):
        mode, xhat, inv = cache
        self.grads["gamma"] += (grad * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += grad.sum(axis=(0, 2, 3))
        gxhat = grad * self.params["gamma"][None, :, None, None]
        if mode == "eval":
            return gxhat * inv
        m1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        m2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return inv * (gxhat - m1 - xhat * m2)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, k, stride=None, pad=0):
        super().__init__()
        self.k, self.stride, self.pad = k, stride or k, pad

    def fwd(self, x, train=True):
        _check_ndim(x, 4, "maxpool")
        y, idx = kernels.maxpool_forward(np.ascontiguousarray(x), self.k, self.stride, self.pad)
        return y, (x.shape, idx)

    def bwd(self, cache, grad):
        x_shape, idx = cache
        return kernels.maxpool_backward(np.ascontiguousarray(grad), idx, x_shape)


class AvgPool2d(Layer):
    """Average pooling; padded cells count toward the window size."""

    kind = "avgpool"

    def __init__(self, k, stride=None, pad=0):
        super().__init__()
        self.k, self.stride, self.pad = k, stride or k, pad

    def fwd(self, x, train=True):
        _check_ndim(x, 4, "avgpool")
        n, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.pad
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        cols = kernels.im2col(x, k, k, s, s, p, p).reshape(n, c, k * k, ho * wo)
        return cols.mean(axis=2).reshape(n, c, ho, wo), x.shape

    def bwd(self, cache, grad):
        n, c, h, w = cache
        k, s, p = self.k, self.stride, self.pad
        g = grad.reshape(n, c, 1, -1) / (k * k)
        dcols = np.broadcast_to(g, (n, c, k * k, g.shape[-1]))
        return kernels.col2im(np.ascontiguousarray(dcols), cache, k, k, s, s, p, p)


class GlobalAvgPool(Layer):
    """Mean over spatial extents: [N,C,H,W] -> [N,C]."""

    kind = "gap"

    def fwd(self, x, train=True):
        _check_ndim(x, 4, "gap")
        return x.mean(axis=(2, 3)), x.shape

    def bwd(self, cache, grad):
        n, c, h, w = cache
        return np.broadcast_to(grad[:, :, None, None] / (h * w), cache).copy()


class Linear(Layer):
    kind = "fc"

    def __init__(self, in_dim, out_dim, rng=None, std=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_dim, self.out_dim = in_dim, out_dim
        std = np.sqrt(1.0 / in_dim) if std is None else std
        self.params["W"] = rng.normal(0.0, std, size=(out_dim, in_dim))
        self.params["b"] = np.zeros(out_dim)
        self._init_grads()

    def fwd(self, x, train=True):
        _check_ndim(x, 2, "fc")
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"fc: input dim {x.shape[1]} != {self.in_dim}")
        return x @ self.params["W"].T + self.params["b"], x

    def bwd(self, cache, grad):
        self.grads["W"] += grad.T @ cache
        self.grads["b"] += grad.sum(axis=0)
        return grad @ self.params["W"]

    def __repr__(self):
        return f"Linear({self.in_dim}, {self.out_dim})"


class Sequential(Layer):
    """Chain of layers; parameters are addressed as ``<index>.<name>``."""

    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def fwd(self, x, train=True):
        caches = []
        for layer in self.layers:
            x, c = layer.fwd(x, train)
            caches.append(c)
        return x, caches

    def bwd(self, caches, grad):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            grad = layer.bwd(c, grad)
        return grad

    def named_layers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}{i}", layer

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def __repr__(self):
        return "Sequential(" + ", ".join(repr(l) for l in self.layers) + ")"
