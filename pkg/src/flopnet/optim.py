"""Adam with decoupled weight decay and an EMA parameter shadow.

Weight decay touches layer weights only, never biases or gate log_alpha.
The shadow copy tracks every parameter after each step; evaluation swaps
the shadow in and training continues on the raw values afterwards.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class AdamState:
    """Optimizer state over a fixed list of (name, tensor, kind) params."""

    DECAYED_KINDS = ("weight",)

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, ema_decay=0.999):
        if not 0.0 <= ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {ema_decay}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.step_count = 0
        self._m = {t.id: np.zeros_like(t.data) for _, t, _ in self.params}
        self._v = {t.id: np.zeros_like(t.data) for _, t, _ in self.params}
        self._shadow = None
        self._swapped = False

    def step(self, grads):
        """One Adam update in place; decoupled decay on weights only."""
        if self._swapped:
            raise RuntimeError("cannot step while shadow parameters are swapped in")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p, kind in self.params:
            g = grads.get(p.id)
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
            m = self._m[p.id]
            v = self._v[p.id]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * update
            if self.weight_decay and kind in self.DECAYED_KINDS:
                p.data -= self.lr * self.weight_decay * p.data

    def ema_update(self):
        """shadow <- decay * shadow + (1 - decay) * params."""
        if self._swapped:
            raise RuntimeError("cannot update shadow while it is swapped in")
        if self._shadow is None:
            self._shadow = {t.id: t.data.copy() for _, t, _ in self.params}
            if self.ema_decay == 0.0:
                return
        d = self.ema_decay
        for _, p, _ in self.params:
            s = self._shadow[p.id]
            s *= d
            s += (1.0 - d) * p.data

    def ema_swap_in(self):
        """Exchange raw parameters with the shadow; call again to restore."""
        if self._shadow is None:
            raise RuntimeError("ema_swap_in before any ema_update")
        for _, p, _ in self.params:
            tmp = p.data.copy()
            p.data[...] = self._shadow[p.id]
            self._shadow[p.id][...] = tmp
        self._swapped = not self._swapped

    @contextmanager
    def averaged_parameters(self):
        self.ema_swap_in()
        try:
            yield
        finally:
            self.ema_swap_in()

    def shadow_value(self, tensor):
        if self._shadow is None:
            raise RuntimeError("no shadow yet")
        return self._shadow[tensor.id]

    def seed_shadow(self, values):
        """Install shadow arrays (e.g. carried through a prune mapping)."""
        self._shadow = {t.id: np.array(values[name], dtype=t.data.dtype)
                        for name, t, _ in self.params}
        for name, t, _ in self.params:
            if self._shadow[t.id].shape != t.data.shape:
                raise ValueError(f"shadow for {name} has shape "
                                 f"{self._shadow[t.id].shape}, expected {t.data.shape}")
