"""AdamW optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .errors import MissingGradient


class AdamW:
    """Decoupled weight decay (p -= lr*wd*p) followed by bias-corrected Adam.

    Holds first/second moment buffers per parameter and a shared step count.
    Gradients are left untouched; the caller zeroes them.
    """

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-2):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self):
        for name, p in self.named_params:
            if p.grad is None:
                raise MissingGradient(f"parameter '{name}' has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.named_params:
            g = p.grad
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def state_arrays(self):
        """Optimizer state as named arrays (for checkpointing)."""
        out = {"opt.step": np.asarray(float(self.step_count))}
        for name, _ in self.named_params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(round(float(arrays["opt.step"])))
        for name, p in self.named_params:
            self.m[name] = np.asarray(arrays[f"opt.m.{name}"], dtype=p.data.dtype).reshape(p.data.shape)
            self.v[name] = np.asarray(arrays[f"opt.v.{name}"], dtype=p.data.dtype).reshape(p.data.shape)
