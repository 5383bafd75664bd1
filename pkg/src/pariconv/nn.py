"""Parameter containers on top of the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAKY_SLOPE = 0.2


class Module:
    """Base class: parameters are ``Tensor`` attributes with ``requires_grad``,
    buffers are numpy arrays listed in ``_buffer_names``; both are discovered in
    attribute insertion order, which keeps naming deterministic."""

    _buffer_names: tuple = ()
    training: bool = False

    def _children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, list) and v and all(isinstance(m, Module) for m in v):
                for i, m in enumerate(v):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = ""):
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return dict(self.named_parameters())

    def state(self) -> dict:
        """Parameters and buffers as plain arrays, keyed by dotted name."""
        out = {n: p.data for n, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state(self, arrays: dict):
        for name, p in self.named_parameters():
            p.data = np.asarray(arrays[name], dtype=p.dtype).reshape(p.shape).copy()
        for name, buf in self.named_buffers():
            buf[...] = np.asarray(arrays[name]).reshape(buf.shape)

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def kaiming_uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / ((1.0 + LEAKY_SLOPE ** 2) * fan_in))
    return rng.uniform(-bound, bound, shape).astype(dtype)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, bias=True):
        self.w = param(kaiming_uniform(rng, n_in, (n_in, n_out), dtype))
        if bias:
            bound = 1.0 / np.sqrt(n_in)
            self.b = param(rng.uniform(-bound, bound, n_out).astype(dtype))
        else:
            self.b = None

    def __call__(self, x):
        y = ad.matmul(x, self.w)
        return y if self.b is None else ad.add(y, self.b)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c, dtype=np.float32):
        self.gamma = param(np.ones(c, dtype))
        self.beta = param(np.zeros(c, dtype))
        self.running_mean = np.zeros(c, dtype)
        self.running_var = np.ones(c, dtype)

    def __call__(self, x):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training)


class MLP2(Module):
    """Linear -> LeakyReLU -> Linear, with no activation on the output."""

    def __init__(self, n_in, hidden, n_out, rng, dtype=np.float32):
        self.fc1 = Linear(n_in, hidden, rng, dtype)
        self.fc2 = Linear(hidden, n_out, rng, dtype)

    def __call__(self, x):
        return self.fc2(ad.leaky_relu(self.fc1(x), LEAKY_SLOPE))


def cast_module(module: Module, dtype) -> Module:
    """Convert parameters and buffers in place to ``dtype``."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(dtype)
        p.grad = None
    stack = [module]
    while stack:
        m = stack.pop()
        for name in m._buffer_names:
            setattr(m, name, getattr(m, name).astype(dtype))
        stack.extend(child for _, child in m._children())
    return module
