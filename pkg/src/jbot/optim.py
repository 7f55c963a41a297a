"""AdamW over a flat ``{name: ndarray}`` parameter mapping (updated in place)."""
import numpy as np

from .network import decays_weight


class AdamW:
    def __init__(self, params, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8, lr_scale=None):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        # per-parameter multiplier on the global learning rate (LLRD)
        self.lr_scale = dict(lr_scale or {})
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            step_lr = lr * self.lr_scale.get(name, 1.0)
            if step_lr == 0.0:
                continue
            if self.weight_decay and decays_weight(name):
                p -= (step_lr * self.weight_decay) * p
            p -= step_lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
