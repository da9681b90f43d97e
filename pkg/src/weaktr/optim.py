"""AdamW, momentum SGD and learning-rate schedules on Parameter lists."""

from __future__ import annotations

import math

import numpy as np


def linear_scaled_lr(batch_size: int, reference_lr: float = 4e-4, reference_batch: int = 512) -> float:
    """lr = reference_lr * batch_size / reference_batch."""
    return reference_lr * batch_size / reference_batch


def warmup_cosine(step: int, total: int, warmup: int) -> float:
    """LR multiplier: linear ramp over ``warmup`` steps, then cosine to zero."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def polynomial(step: int, total: int, power: float = 0.9) -> float:
    return (1.0 - min(step, total) / max(1, total)) ** power


class ParamGroup:
    def __init__(self, params, lr_scale: float = 1.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr_scale = lr_scale
        self.weight_decay = weight_decay


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = list(groups)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for g in self.groups for p in g.params}
        self.v = {id(p): np.zeros_like(p.data) for g in self.groups for p in g.params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for g in self.groups:
            glr = lr * g.lr_scale
            for p in g.params:
                if glr == 0.0:
                    continue
                m, v = self.m[id(p)], self.v[id(p)]
                m *= self.b1
                m += (1.0 - self.b1) * p.grad
                v *= self.b2
                v += (1.0 - self.b2) * p.grad * p.grad
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if g.weight_decay:
                    update = update + g.weight_decay * p.data
                p.data = (p.data - glr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.zero_grad()


class SGD:
    """SGD with heavy-ball momentum: v = mu * v + g; p -= lr * v."""

    def __init__(self, groups, momentum: float = 0.9):
        self.groups = list(groups)
        self.momentum = momentum
        self.buf = {id(p): np.zeros_like(p.data) for g in self.groups for p in g.params}

    def step(self, lr: float) -> None:
        for g in self.groups:
            glr = lr * g.lr_scale
            for p in g.params:
                grad = p.grad
                if g.weight_decay:
                    grad = grad + g.weight_decay * p.data
                b = self.buf[id(p)]
                b *= self.momentum
                b += grad
                if glr:
                    p.data = (p.data - glr * b).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.zero_grad()
