"""Minimal module system: parameter registry, buffers, train/eval mode."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Parameter


class Module:
    """Base class. Parameters, buffers and submodules are discovered from attributes.

    Attribute order defines registry order, which is also the order used by
    checkpoints and the cost model.
    """

    def __init__(self):
        self.training = True
        self._buffers = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name, value):
        self._buffers[name] = value

    def __getattr__(self, name):
        # only reached when normal lookup fails
        buffers = self.__dict__.get("_buffers", {})
        if name in buffers:
            return buffers[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def named_children(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield f"{key}{i + 1}" if value.one_based else f"{key}.{i}", m

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{key}" if prefix else key), value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, value in self._buffers.items():
            yield (f"{prefix}.{key}" if prefix else key), value
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def set_buffer(self, dotted, value):
        owner, _, key = dotted.rpartition(".")
        module = dict(self.named_modules())[owner]
        if key not in module._buffers:
            raise KeyError(dotted)
        module._buffers[key][...] = value

    def assign_names(self):
        for name, p in self.named_parameters():
            p.name = name
        return self

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (used by 64-bit gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            for key, buf in m._buffers.items():
                if buf is not None:
                    m._buffers[key] = buf.astype(dtype)
        return self

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


class ModuleList(list):
    """Ordered container of modules. ``one_based`` names children key1, key2, ..."""

    def __init__(self, modules=(), one_based=False):
        super().__init__(modules)
        self.one_based = one_based


def he_normal(rng, shape, fan_in, dtype=DEFAULT_DTYPE):
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, groups=1, bias=False, rng=None, kernel=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = kernel if kernel is not None else (k, k)
        self.stride = stride
        self.pad = pad
        self.groups = groups
        fan_in = (cin // groups) * kh * kw
        self.weight = Parameter(he_normal(rng, (cout, cin // groups, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(cout, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_mean", np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(channels, dtype=DEFAULT_DTYPE))

    def forward(self, x):
        return F.batchnorm2d(x, self.weight, self.bias, self._buffers["running_mean"],
                             self._buffers["running_var"], self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fin, fout, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter((rng.standard_normal((fout, fin)) / math.sqrt(fin)).astype(DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(fout, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)
