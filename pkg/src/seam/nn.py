"""Parameters and the handful of layers the model zoo is built from."""
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

GROUPS = ("model-weight", "bit-logit", "gm-head", "quant-step")


class Parameter(Tensor):
    """A named leaf tensor that requires gradients."""

    def __init__(self, data, name, group="model-weight"):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(data, requires_grad=True)
        self.name = name
        self.group = group

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group})"


def wrap_parameter(t, name, group):
    """Promote a plain tensor (e.g. an LSQ step) to a :class:`Parameter` in place."""
    if isinstance(t, Parameter):
        return t
    t.__class__ = Parameter
    t.name = name
    t.group = group
    return t


class ParamSet:
    """Ordered, name-unique parameter collection."""

    def __init__(self, params=()):
        self._params = {}
        for p in params:
            self.add(p)

    def add(self, p):
        if p.name in self._params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def extend(self, params):
        for p in params:
            self.add(p)
        return self

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def group(self, group):
        return [p for p in self if p.group == group]

    def zero_grad(self):
        for p in self:
            p.zero_grad()


def kaiming(rng, shape, fan_in):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class QuantLayer:
    """Conv or linear layer with optional weight/input quantization hooks.

    ``weight_quant`` and ``act_quant`` are callables ``Tensor -> Tensor`` set by
    the search or finetune wiring; ``None`` means full precision.
    ``quantize_input=False`` keeps the raw input unquantized (network stem).
    """

    kind = "conv"

    def __init__(self, name, weight, fixed_bits=None, quantize_input=True):
        self.name = name
        self.weight = weight
        self.fixed_bits = fixed_bits
        self.quantize_input = quantize_input
        self.weight_quant = None
        self.act_quant = None
        self.shape = None  # LayerShape, filled by the model builder
        self.calibration = None  # list collecting input samples when not None

    @property
    def searchable(self):
        return self.fixed_bits is None

    def _prep(self, x):
        if self.calibration is not None:
            self.calibration.append(np.asarray(x.data))
        w = self.weight if self.weight_quant is None else self.weight_quant(self.weight)
        if self.act_quant is not None and self.quantize_input:
            x = self.act_quant(x)
        return x, w


class Conv2d(QuantLayer):
    def __init__(self, name, rng, c_in, c_out, k, stride=1, pad=None, depthwise=False, **kw):
        groups = c_in if depthwise else 1
        if depthwise and c_in != c_out:
            raise ValueError("depthwise conv needs c_in == c_out")
        shape = (c_out, c_in // groups, k, k)
        fan_in = (c_in // groups) * k * k
        weight = Parameter(kaiming(rng, shape, fan_in), f"{name}.weight")
        super().__init__(name, weight, **kw)
        self.kind = "dwconv" if depthwise else "conv"
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.groups = groups

    def __call__(self, x):
        x, w = self._prep(x)
        return T.conv2d(x, w, self.stride, self.pad, self.groups)

    def parameters(self):
        return [self.weight]


class Linear(QuantLayer):
    kind = "linear"

    def __init__(self, name, rng, c_in, c_out, bias=False, **kw):
        weight = Parameter(kaiming(rng, (c_out, c_in), c_in) * math.sqrt(0.5), f"{name}.weight")
        super().__init__(name, weight, **kw)
        self.c_in, self.c_out = c_in, c_out
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias") if bias else None

    def __call__(self, x):
        x, w = self._prep(x)
        return T.linear(x, w, self.bias)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class BatchNorm:
    def __init__(self, name, c, momentum=0.1, eps=1e-5):
        self.name = name
        self.gamma = Parameter(np.ones(c), f"{name}.weight")
        self.beta = Parameter(np.zeros(c), f"{name}.bias")
        self.running_mean = np.zeros(c, dtype=T.config.dtype)
        self.running_var = np.ones(c, dtype=T.config.dtype)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def __call__(self, x):
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}
