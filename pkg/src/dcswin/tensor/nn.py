"""Parameter containers and the standard layers built on the primitives."""

from __future__ import annotations

import numpy as np

from . import ops
from .core import Tensor, default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) samples redrawn until they fall within ``bound`` std."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return (z * std).astype(default_dtype())


def he_normal(rng, shape, fan_in):
    """Normal(0, sqrt(2 / fan_in)), the ReLU-preserving scale used for convolutions."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(default_dtype())


def zeros(shape):
    return np.zeros(shape, dtype=default_dtype())


def ones(shape):
    return np.ones(shape, dtype=default_dtype())


class Module:
    """Minimal module tree.

    Parameters, sub-modules and lists of sub-modules are discovered from
    instance attributes in assignment order, which fixes parameter names.
    A module reachable under two attribute names (a shared module) is listed
    once, under the first name.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix="", _seen=None):
        seen = set() if _seen is None else _seen
        if id(self) in seen:
            return
        seen.add(id(self))
        yield prefix, self
        for key, child in self._children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key, seen)

    def named_parameters(self):
        seen = set()
        for mprefix, module in self.named_modules():
            for key, value in vars(module).items():
                if isinstance(value, Parameter) and id(value) not in seen:
                    seen.add(id(value))
                    yield (f"{mprefix}.{key}" if mprefix else key), value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        """Non-trainable arrays that are still part of the model state."""
        for mprefix, module in self.named_modules():
            for key, arr in module._buffers():
                yield (f"{mprefix}.{key}" if mprefix else key), arr

    def _buffers(self):
        return ()

    def state_dict(self):
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state, strict=True):
        """Copy arrays in by name; ``strict=False`` tolerates names absent from ``state``."""
        own = self.state_dict()
        missing = sorted(set(own) - set(state)) if strict else []
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            target = own[name]
            if target.shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {tuple(arr.shape)} != {target.shape}")
            target[...] = arr

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def to(self, dtype):
        """Cast every parameter and buffer in place."""
        dtype = np.dtype(dtype)
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            m._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        pass


class Identity(Module):
    def forward(self, x):
        return x


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, bias=True):
        self.weight = Parameter(trunc_normal(rng, (fan_in, fan_out)))
        self.bias = Parameter(zeros(fan_out)) if bias else None

    def forward(self, x):
        out = ops.matmul(x, self.weight)
        return out if self.bias is None else ops.add(out, self.bias)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1, bias=True):
        self.weight = Parameter(he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel))
        self.bias = Parameter(zeros(cout)) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, bias=True):
        # each output pixel sees cin * (kernel / stride)^2 inputs
        fan_in = max(1, cin * kernel * kernel // (stride * stride))
        self.weight = Parameter(he_normal(rng, (cin, cout, kernel, kernel), fan_in))
        self.bias = Parameter(zeros(cout)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return ops.transpose_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.weight = Parameter(ones(channels))
        self.bias = Parameter(zeros(channels))
        self.stats = ops.RunningStats(channels, default_dtype(), momentum)
        self.eps = eps

    def _buffers(self):
        return (("running_mean", self.stats.mean), ("running_var", self.stats.var))

    def _cast_buffers(self, dtype):
        self.stats.mean = self.stats.mean.astype(dtype)
        self.stats.var = self.stats.var.astype(dtype)

    def forward(self, x):
        return ops.batch_norm2d(x, self.weight, self.bias, self.stats, self.training, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = Parameter(ones(dim))
        self.bias = Parameter(zeros(dim))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class ConvBN(Module):
    """Bias-free convolution followed by batch norm."""

    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1):
        self.conv = Conv2d(cin, cout, kernel, rng, stride, padding, dilation, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return self.bn(self.conv(x))
