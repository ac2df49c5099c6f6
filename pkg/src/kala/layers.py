"""Parameter containers used by every model component."""

import numpy as np

from . import numerics as nx
from .numerics import Tensor

INIT_STD = 0.02


class Module:
    """Anything that owns parameters.

    Parameters are ``Tensor`` attributes with ``requires_grad`` set; child
    modules may be attributes or lists of modules. Names are dotted paths in
    attribute-definition order, which keeps checkpoints stable.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
            elif isinstance(value, dict):
                for key in sorted(value):
                    item = value[key]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def param(array):
    return Tensor(np.array(array, dtype=np.float64), requires_grad=True)


def normal(rng, shape, std=INIT_STD):
    return param(rng.normal(0.0, std, size=shape))


def zeros(shape):
    return param(np.zeros(shape))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, zero_init=False, std=INIT_STD):
        self.weight = zeros((d_in, d_out)) if zero_init else normal(rng, (d_in, d_out), std)
        self.bias = zeros((d_out,)) if bias else None

    def __call__(self, x):
        out = nx.matmul(x, self.weight)
        if self.bias is not None:
            out = nx.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, d, eps=nx.LN_EPS):
        self.gain = param(np.ones(d))
        self.bias = zeros((d,))
        self.eps = eps

    def __call__(self, x):
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Two affine layers with a ReLU between them."""

    def __init__(self, d_in, d_hidden, d_out, rng, zero_last=False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero_init=zero_last)

    def __call__(self, x):
        return self.fc2(nx.relu(self.fc1(x)))
