"""Stochastic gradient descent with momentum and L2 weight decay."""

from __future__ import annotations

import numpy as np

from .exceptions import StateError


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0, buffers=None):
    """Apply one update in place and zero the gradients.

    ``v <- momentum*v + grad + weight_decay*param``; ``param <- param - lr*v``.
    ``buffers`` maps ``id(param)`` (or a caller-chosen key) to velocity
    arrays and is updated in place.
    """
    buffers = {} if buffers is None else buffers
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {getattr(p, 'name', '') or p!r} has no gradient")
    for p in params:
        key = getattr(p, "name", "") or id(p)
        d = p.grad.astype(p.dtype, copy=False)
        if weight_decay:
            d = d + weight_decay * p.data
        v = buffers.get(key)
        if v is None or not momentum:
            v = np.array(d, copy=True)
        else:
            v *= momentum
            v += d
        buffers[key] = v
        p.data -= lr * v
        p.grad = None
    return buffers


class SGD:
    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {}

    def step(self):
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.buffers)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
