"""Layers built on :mod:`locallearn.autodiff`.

Each layer knows its output shape and how many activation elements it keeps
for backward (``saved_elements``); the memory accountant relies on these
formulas matching what the ops actually record.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

# per-sample shapes throughout: (C, H, W) or (D,)
Shape = tuple


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 6.0) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(gain / fan_in)."""
    bound = math.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    training = True

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()
        for v in self.__dict__.values():
            for p in _collect(v):
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def children(self) -> list["Module"]:
        out = []
        for v in self.__dict__.values():
            if isinstance(v, Module):
                out.append(v)
            elif isinstance(v, (list, tuple)):
                out.extend(m for m in v if isinstance(m, Module))
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def buffers(self) -> list[np.ndarray]:
        out = []
        for c in self.children():
            out.extend(c.buffers())
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def out_shape(self, in_shape: Shape) -> Shape:
        raise NotImplementedError

    def saved_elements(self, in_shape: Shape) -> int:
        """Activation elements kept for backward, per sample."""
        raise NotImplementedError


def _collect(v):
    if isinstance(v, Parameter):
        yield v
    elif isinstance(v, Module):
        yield from v.parameters()
    elif isinstance(v, (list, tuple)):
        for item in v:
            yield from _collect(item)


def _numel(shape) -> int:
    return int(np.prod(shape))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, rng=None, bias: bool = False):
        if k not in (1, 3):
            raise ValueError(f"Conv2d supports 1x1 and 3x3 kernels, got {k}")
        if stride not in (1, 2):
            raise ValueError(f"Conv2d stride must be 1 or 2, got {stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        self.weight = Parameter(fan_in_uniform(rng, (cout, cin, k, k), fan_in), "conv.weight")
        self.bias = Parameter(fan_in_uniform(rng, (cout,), fan_in, 1.0), "conv.bias") if bias else None
        self.stride = stride
        self.k = k
        self.cin, self.cout = cin, cout

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        pad = self.k // 2
        return (self.cout, ad.conv_output_size(h, self.k, self.stride, pad),
                ad.conv_output_size(w, self.k, self.stride, pad))

    def saved_elements(self, in_shape):
        return _numel(in_shape)


class BatchNorm(Module):
    def __init__(self, c: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(c), "bn.gamma")
        self.beta = Parameter(np.zeros(c), "bn.beta")
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)

    def buffers(self):
        return [self.running_mean, self.running_var]

    def out_shape(self, in_shape):
        return in_shape

    def saved_elements(self, in_shape):
        # normalised input per sample; the per-channel inverse std is added per batch
        return _numel(in_shape)

    def saved_per_batch(self) -> int:
        return self.gamma.size


class ReLU(Module):
    def forward(self, x):
        return ad.relu(x)

    def out_shape(self, in_shape):
        return in_shape

    def saved_elements(self, in_shape):
        return _numel(in_shape)


class Sigmoid(Module):
    def forward(self, x):
        return ad.sigmoid(x)

    def out_shape(self, in_shape):
        return in_shape

    def saved_elements(self, in_shape):
        return _numel(in_shape)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(fan_in_uniform(rng, (fout, fin), fin, 1.0), "linear.weight")
        self.bias = Parameter(fan_in_uniform(rng, (fout,), fin, 1.0), "linear.bias") if bias else None
        self.fin, self.fout = fin, fout

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)

    def out_shape(self, in_shape):
        if _numel(in_shape) != self.fin:
            raise ValueError(f"Linear: incompatible shapes {in_shape} and ({self.fout}, {self.fin})")
        return (self.fout,)

    def saved_elements(self, in_shape):
        return _numel(in_shape)


class GlobalAvgPool(Module):
    def forward(self, x):
        return ad.global_avg_pool(x)

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def saved_elements(self, in_shape):
        return 0


class Flatten(Module):
    def forward(self, x):
        return ad.flatten(x)

    def out_shape(self, in_shape):
        return (_numel(in_shape),)

    def saved_elements(self, in_shape):
        return 0


class Upsample(Module):
    """Bilinear resize to a fixed spatial size."""

    def __init__(self, size: tuple[int, int]):
        self.size = tuple(size)

    def forward(self, x):
        return ad.upsample_bilinear(x, self.size)

    def out_shape(self, in_shape):
        return (in_shape[0],) + self.size

    def saved_elements(self, in_shape):
        return 0


class L2Normalize(Module):
    def forward(self, x):
        return ad.l2_normalize(x)

    def out_shape(self, in_shape):
        return in_shape

    def saved_elements(self, in_shape):
        return _numel(in_shape) + 1


class Dropout(Module):
    """Inverted dropout driven by a (seed, step, layer_id) counter RNG.

    The trainer sets ``step`` before each forward so that any execution order
    reproduces the same masks.
    """

    def __init__(self, p: float, seed: int = 0, layer_id: int = 0):
        self.p = p
        self.seed = seed
        self.layer_id = layer_id
        self.step = 0

    def forward(self, x):
        return ad.dropout(x, self.p, self.training, self.seed, self.step, self.layer_id)

    def out_shape(self, in_shape):
        return in_shape

    def saved_elements(self, in_shape):
        return _numel(in_shape) if (self.training and self.p > 0) else 0


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def out_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.out_shape(in_shape)
        return in_shape

    def saved_elements(self, in_shape):
        total = 0
        for layer in self.layers:
            total += layer.saved_elements(in_shape)
            in_shape = layer.out_shape(in_shape)
        return total

    def saved_per_batch(self) -> int:
        return sum(_per_batch(layer) for layer in self.layers)


def _per_batch(m: Module) -> int:
    if hasattr(m, "saved_per_batch"):
        return m.saved_per_batch()
    return sum(_per_batch(c) for c in m.children())


def saved_total(m: Module, in_shape: Shape, batch: int) -> int:
    """Saved elements of one training forward of ``m`` on a batch."""
    return batch * m.saved_elements(in_shape) + _per_batch(m)


def conv_bn_relu(cin, cout, stride, rng) -> Sequential:
    return Sequential(Conv2d(cin, cout, 3, stride, rng), BatchNorm(cout), ReLU())


class ResidualBlock(Module):
    """Two 3x3 conv-BN layers plus a shortcut, followed by ReLU.

    The shortcut is a 1x1 strided conv + BN when the shape changes.
    """

    def __init__(self, cin: int, cout: int, stride: int, rng):
        self.body = Sequential(Conv2d(cin, cout, 3, stride, rng), BatchNorm(cout), ReLU(),
                               Conv2d(cout, cout, 3, 1, rng), BatchNorm(cout))
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = Sequential(Conv2d(cin, cout, 1, stride, rng), BatchNorm(cout))
        self.relu = ReLU()

    def forward(self, x):
        s = x if self.shortcut is None else self.shortcut(x)
        return self.relu(ad.add(self.body(x), s))

    def out_shape(self, in_shape):
        return self.body.out_shape(in_shape)

    def saved_elements(self, in_shape):
        out = self.out_shape(in_shape)
        n = self.body.saved_elements(in_shape) + self.relu.saved_elements(out)
        if self.shortcut is not None:
            n += self.shortcut.saved_elements(in_shape)
        return n


def state_dict(m: Module) -> list[np.ndarray]:
    """Copies of all parameter values followed by all buffers, in a stable order."""
    return [p.data.copy() for p in m.parameters()] + [b.copy() for b in m.buffers()]


def load_state(m: Module, state: list[np.ndarray]) -> None:
    arrays = [p.data for p in m.parameters()] + m.buffers()
    if len(arrays) != len(state):
        raise ValueError(f"state has {len(state)} arrays, module expects {len(arrays)}")
    for dst, src in zip(arrays, state):
        if dst.shape != src.shape:
            raise ValueError(f"state shape mismatch: {src.shape} vs {dst.shape}")
        dst[...] = src
