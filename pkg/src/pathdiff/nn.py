"""Parameter containers and small layers.

Initialization is scaled uniform fan-in: every weight matrix with fan-in ``n``
is drawn from ``U(-1/sqrt(n), 1/sqrt(n))``; biases start at zero.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Collects Tensor attributes, child modules and lists of child modules."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class FeedForward(Module):
    """Position-wise two-layer network with a GELU hidden layer.

    ``bias=False`` gives ``f(0) == 0``, which the space experts rely on.
    """

    def __init__(self, d_in, d_hidden, d_out, rng, bias=True):
        self.fc1 = Linear(d_in, d_hidden, rng, bias=bias)
        self.fc2 = Linear(d_hidden, d_out, rng, bias=bias)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.shift = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x) * self.gain + self.shift
