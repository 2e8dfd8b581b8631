"""Plain SGD with momentum and L2 weight decay."""
from __future__ import annotations

import numpy as np


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """Update ``params`` (arrays or Tensors) in place.

    ``velocity`` is a list of momentum buffers parallel to ``params``; it is
    required when ``momentum > 0`` and updated in place.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if not isinstance(p, np.ndarray):
            p = p.data
        if p.shape != g.shape:
            raise ValueError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        d = g + weight_decay * p if weight_decay else g
        if momentum:
            if velocity is None:
                raise ValueError("momentum needs velocity buffers")
            v = velocity[i]
            v *= momentum
            v += d
            d = v
        p -= lr * d


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


class SGD:
    """SGD with momentum, coupled weight decay and optional global norm clipping."""

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=0.0, max_grad_norm=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.last_grad_norm = None
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self):
        self.last_grad_norm = clip_grad_norm([p.grad for p in self.params], self.max_grad_norm)
        sgd_step(self.params, [p.grad for p in self.params], self.lr,
                 self.momentum, self.weight_decay, self.velocity)
