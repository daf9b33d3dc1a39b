"""Feature weighting and fusion of global and part features.

``fused = [g, h_k]`` where ``h_0 = p`` and each weight layer computes
``h_l = tanh(h_{l-1} * W_l + B_l)`` elementwise. ``k = 0`` is one weight
layer without the tanh.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StateError

MAX_DEPTH = 4


@dataclass(frozen=True)
class FwnConfig:
    k: int = 1

    def __post_init__(self):
        if self.k not in range(MAX_DEPTH + 1):
            raise ConfigError(f"fwn depth k must be in 0..{MAX_DEPTH}, got {self.k}")

    @property
    def layers(self):
        return max(self.k, 1)

    @property
    def nonlinear(self):
        return self.k >= 1


class FeatureWeighting:
    """Weight layers over an ``n``-dim part feature; W starts at 1, B at 0."""

    def __init__(self, n, config=FwnConfig()):
        self.n = n
        self.config = config
        self.params = {}
        for l in range(config.layers):
            self.params[self._name(l, "W")] = np.ones(n)
            self.params[self._name(l, "B")] = np.zeros(n)
        self.zero_grad()
        self._cache = None

    def _name(self, l, which):
        if self.config.layers == 1:
            return f"fwn.{which}"
        return f"fwn.l{l}.{which}"

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def fwd(self, g, p):
        g = np.asarray(g, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if p.shape[-1] != self.n:
            raise ShapeError(f"fwn: part feature dim {p.shape[-1]} != {self.n}")
        if g.shape[:-1] != p.shape[:-1]:
            raise ShapeError(f"fwn: global {g.shape} and part {p.shape} batch shapes differ")
        hs = [p]
        h = p
        for l in range(self.config.layers):
            z = h * self.params[self._name(l, "W")] + self.params[self._name(l, "B")]
            h = np.tanh(z) if self.config.nonlinear else z
            hs.append(h)
        return np.concatenate([g, h], axis=-1), (g.shape[-1], hs)

    def bwd(self, cache, grad):
        m, hs = cache
        grad = np.asarray(grad, dtype=np.float64)
        grad_global = grad[..., :m].copy()
        gh = grad[..., m:]
        batch_axes = tuple(range(gh.ndim - 1))
        for l in reversed(range(self.config.layers)):
            h_in, h_out = hs[l], hs[l + 1]
            gz = gh * (1.0 - h_out * h_out) if self.config.nonlinear else gh
            self.grads[self._name(l, "W")] += (gz * h_in).sum(axis=batch_axes)
            self.grads[self._name(l, "B")] += gz.sum(axis=batch_axes)
            gh = gz * self.params[self._name(l, "W")]
        return grad_global, gh

    def forward(self, g, p):
        out, self._cache = self.fwd(g, p)
        return out

    def backward(self, grad):
        if self._cache is None:
            raise StateError("fwn: backward called before forward")
        return self.bwd(self._cache, grad)


def fwn_forward(f_global, f_part, params, config=FwnConfig()):
    """Functional fusion with explicit ``params`` (name -> vector)."""
    fw = FeatureWeighting(np.shape(f_part)[-1], config)
    for k in fw.params:
        if np.shape(params[k]) != fw.params[k].shape:
            raise ShapeError(f"fwn: {k} has shape {np.shape(params[k])}, expected {fw.params[k].shape}")
        fw.params[k] = np.asarray(params[k], dtype=np.float64)
    return fw.forward(f_global, f_part), fw


def fwn_backward(grad_fusion, fw):
    """Return ``(grad_global, grad_part, param_grads)`` for a forwarded :class:`FeatureWeighting`."""
    fw.zero_grad()
    gg, gp = fw.backward(grad_fusion)
    return gg, gp, dict(fw.grads)


def fwn_distance(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"distance between shapes {a.shape} and {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))
