"""Parameter containers and layer modules.

A Module owns Parameters and child Modules; ``named_parameters`` walks them
in deterministic registration order, which checkpointing and the optimizer
both rely on. There are no normalization layers anywhere in the network, so
initialization scale carries the burden of keeping activations tame.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires grad and carries optimizer state."""

    __slots__ = ("m", "v")

    def __init__(self, data):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)
        self.m = None  # first-moment buffer, lazily allocated by the optimizer
        self.v = None

    def zero_(self) -> None:
        """In-place zero fill; used for layers that must start as a no-op."""
        self.data[...] = 0


class Module:
    """Base class tracking parameters and submodules in registration order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._modules[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        """Cast all parameters in place (float64 for derivative checking)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Conv2d(Module):
    """2-D convolution layer, fan-in scaled uniform init, optional bias."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 pad: int = 0, dilation: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if in_ch < 1 or out_ch < 1 or k < 1:
            raise ConfigError(f"Conv2d: bad geometry in={in_ch} out={out_ch} k={k}")
        self.stride = stride
        self.pad = pad
        self.dilation = dilation
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * k * k
        bound = float(np.sqrt(2.0 / fan_in))
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        self.weight = Parameter(w.astype(np.float32))
        if bias:
            self.bias = Parameter(np.zeros(out_ch, dtype=np.float32))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias,
                          stride=self.stride, pad=self.pad, dilation=self.dilation)


class Conv1dCircular(Module):
    """1-D convolution over closed contours (circular padding)."""

    def __init__(self, in_ch: int, out_ch: int, k: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if k % 2 != 1:
            raise ConfigError("Conv1dCircular: kernel size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * k
        bound = float(np.sqrt(2.0 / fan_in))
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, 1, k))
        self.weight = Parameter(w.astype(np.float32))
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d_circular(x, self.weight, self.bias)
