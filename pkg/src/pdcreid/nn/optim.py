from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError


@dataclass
class SgdConfig:
    """Step-decay SGD with momentum.

    ``lr(it) = base_lr * lr_decay_factor ** (it // decay_interval)``; each
    parameter group may scale it with its own multiplier.
    """

    base_lr: float = 0.01
    lr_decay_factor: float = 0.1
    decay_interval: int = 20000
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.decay_interval <= 0:
            raise ConfigError(f"decay_interval must be > 0, got {self.decay_interval}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def lr_at(self, iteration, multiplier=1.0):
        if multiplier < 0:
            raise ConfigError(f"lr multiplier must be >= 0, got {multiplier}")
        return self.base_lr * self.lr_decay_factor ** (iteration // self.decay_interval) * multiplier


class SGD:
    """Caffe-style momentum SGD: ``v = mu*v + lr*(g + wd*p); p -= v``.

    Updates are in place, in sorted parameter-name order.
    """

    def __init__(self, config):
        self.config = config
        self.velocity = {}

    def step(self, params, grads, iteration, multipliers=None):
        multipliers = multipliers or {}
        cfg = self.config
        for name in sorted(params):
            p, g = params[name], grads[name]
            if p.shape != g.shape:
                raise ShapeError(f"sgd: {name} has shape {p.shape} but gradient {g.shape}")
            lr = cfg.lr_at(iteration, multipliers.get(name, 1.0))
            if lr == 0.0:
                continue
            step = g + cfg.weight_decay * p if cfg.weight_decay else g
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = cfg.momentum * v + lr * step
            self.velocity[name] = v
            p -= v


def sgd_step(params, grads, config, iteration, multipliers=None, velocity=None):
    """Functional form of one SGD update; returns ``(new_params, new_velocity)``."""
    velocity = dict(velocity or {})
    new = {k: v.copy() for k, v in params.items()}
    opt = SGD(config)
    opt.velocity = {k: v.copy() for k, v in velocity.items()}
    opt.step(new, grads, iteration, multipliers)
    return new, opt.velocity
