"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


class AdamW:
    """Standard AdamW. Parameter groups carry their own lr / weight decay.

    Groups are either a flat list of tensors (one group with the default
    hyperparameters) or dicts ``{"params": [...], "lr": ..., "weight_decay": ...}``.
    """

    def __init__(self, params, lr=4e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.groups = []
        params = list(params)
        if params and isinstance(params[0], dict):
            for g in params:
                self.groups.append({
                    "params": list(g["params"]),
                    "lr": g.get("lr", lr),
                    "weight_decay": g.get("weight_decay", weight_decay),
                })
        else:
            self.groups.append({"params": params, "lr": lr, "weight_decay": weight_decay})
        self._m = {}
        self._v = {}
        for g in self.groups:
            for p in g["params"]:
                self._m[id(p)] = np.zeros_like(p.data)
                self._v[id(p)] = np.zeros_like(p.data)

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            for p in g["params"]:
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                if grad.shape != p.data.shape:
                    raise ShapeError(f"grad shape {grad.shape} != param shape {p.data.shape}")
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                # decoupled decay: shrink the parameter, not the gradient
                p.data *= (1.0 - lr * wd)
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
