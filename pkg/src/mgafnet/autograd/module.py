"""Parameter containers and seeded initialisers."""
from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor, default_dtype


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def xavier_uniform(rng, shape, fan_in, fan_out, gain=1.0):
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Init:
    """Seeded initialiser; each parameter name draws from its own stream.

    Parameters that share a name across architectures therefore start from
    identical values, whatever else the network contains.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)

    def rng(self, name):
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def he(self, name, shape, fan_in):
        return param(he_normal(self.rng(name), shape, fan_in))

    def xavier(self, name, shape, fan_in, fan_out, gain=1.0):
        return param(xavier_uniform(self.rng(name), shape, fan_in, fan_out, gain))


def param(values):
    return Tensor(np.asarray(values, dtype=default_dtype()), requires_grad=True)


def zeros(*shape):
    return param(np.zeros(shape))


def ones(*shape):
    return param(np.ones(shape))


class Module:
    """Collects parameters from attributes: Tensors, sub-Modules and lists of them."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            self._collect(f"{prefix}{name}", value, out)
        return out

    @classmethod
    def _collect(cls, name, value, out):
        if isinstance(value, Tensor):
            if value.requires_grad:
                out[name] = value
        elif isinstance(value, Module):
            out.update(value.named_parameters(prefix=name + "."))
        elif isinstance(value, (list, tuple)):
            for i, v in enumerate(value):
                cls._collect(f"{name}.{i}", v, out)
        elif isinstance(value, dict):
            for k, v in value.items():
                cls._collect(f"{name}.{k}", v, out)

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()
