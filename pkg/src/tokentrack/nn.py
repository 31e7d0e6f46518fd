"""Small layer library on top of the tensor core.

Modules register parameters and submodules in definition order, so the
flattened parameter list (and therefore checkpoints and optimizer state)
is deterministic.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = np.asarray(array)
        object.__setattr__(self, name, self._buffers[name])

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        super().__init__()
        self.weight = _uniform(rng, in_dim, (in_dim, out_dim), dtype)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, dtype=np.float32):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.weight = _uniform(rng, fan_in, (out_ch, in_ch, kernel, kernel), dtype)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, num_ch, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(np.ones(num_ch, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(num_ch, dtype=dtype), requires_grad=True)
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(num_ch, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_ch, dtype=dtype))

    def __call__(self, x):
        return T.batch_norm(x, self.weight, self.bias,
                            self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum)


class Mlp(Module):
    """Two-layer GELU MLP, the standard transformer feed-forward."""

    def __init__(self, dim, hidden, rng, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))
