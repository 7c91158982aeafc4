"""Optimizers and learning-rate schedule for the training loops."""
from __future__ import annotations

import math

import numpy as np

from .errors import NumericsError

__all__ = ["AdamW", "SGD", "cosine_warmup_lr", "grad_and_step"]


class AdamW:
    """Adam with decoupled weight decay; zero gradient still decays weights."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.95), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= lr * update


class SGD:
    def __init__(self, params, lr=1e-3, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buf = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p, b in zip(self.params, self.buf):
            b *= self.momentum
            b += p.grad
            p.value -= lr * b


def cosine_warmup_lr(base_lr: float, epoch: float, total_epochs: float,
                     warmup_epochs: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero; epoch may be fractional."""
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    if total_epochs <= warmup_epochs:
        return base_lr
    t = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


def grad_and_step(loss_and_grad, params, optimizer, lr=None) -> float:
    """Zero grads, evaluate loss_and_grad (which fills Param.grad), step.

    Aborts with NumericsError when the loss is non-finite.
    """
    for p in params:
        p.grad[...] = 0.0
    loss = float(loss_and_grad())
    if not math.isfinite(loss):
        raise NumericsError(f"non-finite loss {loss}; aborting run")
    optimizer.step(lr)
    return loss
