"""The primary network as a chain of indivisible basic layers, and its split into local modules."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import aux_nets
from .nn import (BatchNorm, Dropout, Linear, Module, ReLU, ResidualBlock, Sequential,
                 conv_bn_relu)

log = logging.getLogger(__name__)

LAYER_KINDS = ("stem-conv", "residual-block", "dense-layer", "transition", "classifier-head")


@dataclass
class BasicLayer:
    kind: str
    net: Module
    in_shape: tuple
    out_shape: tuple

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def parameters(self):
        return self.net.parameters()


@dataclass
class LayerGraph:
    layers: list[BasicLayer]
    head: BasicLayer
    input_shape: tuple
    n_classes: int
    name: str = ""

    def __post_init__(self):
        shape = self.input_shape
        for i, layer in enumerate(self.layers + [self.head]):
            if layer.in_shape != shape:
                raise ValueError(f"layer {i} ({layer.kind}) expects {layer.in_shape}, receives {shape}")
            shape = layer.out_shape

    def __len__(self):
        return len(self.layers)

    def parameters(self):
        out = []
        for layer in self.layers + [self.head]:
            out.extend(layer.parameters())
        return out


def _chain(kind_nets, input_shape):
    layers = []
    shape = input_shape
    for kind, net in kind_nets:
        out = net.out_shape(shape)
        layers.append(BasicLayer(kind, net, shape, out))
        shape = out
    return layers, shape


def resnet(blocks_per_stage: int, input_shape=(3, 16, 16), n_classes: int = 10,
           widths=(16, 32, 64), rng=None, name: str = "") -> LayerGraph:
    """CIFAR-style ResNet: a stem conv and three stages of residual blocks.

    The stem and every residual block are basic layers, so the graph has
    ``1 + 3 * blocks_per_stage`` of them.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    nets = [("stem-conv", conv_bn_relu(input_shape[0], widths[0], 1, rng))]
    cin = widths[0]
    for stage, w in enumerate(widths):
        for b in range(blocks_per_stage):
            stride = 2 if (stage > 0 and b == 0) else 1
            nets.append(("residual-block", ResidualBlock(cin, w, stride, rng)))
            cin = w
    layers, shape = _chain(nets, tuple(input_shape))
    head_net = aux_nets.build_linear_head(shape, n_classes, rng)
    head = BasicLayer("classifier-head", head_net, shape, head_net.out_shape(shape))
    return LayerGraph(layers, head, tuple(input_shape), n_classes, name or f"resnet{6 * blocks_per_stage + 2}")


def mlp(input_dim: int, hidden=(32, 32, 32), n_classes: int = 4, rng=None, batch_norm: bool = False,
        dropout: float = 0.0, seed: int = 0, name: str = "mlp") -> LayerGraph:
    """Stack of dense layers (Linear [+BN] + ReLU [+dropout]) and a linear head."""
    rng = rng if rng is not None else np.random.default_rng(0)
    nets = []
    fin = input_dim
    for i, h in enumerate(hidden):
        parts = [Linear(fin, h, rng)]
        if batch_norm:
            parts.append(BatchNorm(h))
        parts.append(ReLU())
        if dropout > 0:
            parts.append(Dropout(dropout, seed=seed, layer_id=i))
        nets.append(("dense-layer", Sequential(*parts)))
        fin = h
    layers, shape = _chain(nets, (input_dim,))
    head_net = Sequential(Linear(fin, n_classes, rng))
    head = BasicLayer("classifier-head", head_net, shape, head_net.out_shape(shape))
    return LayerGraph(layers, head, (input_dim,), n_classes, name)


RESNET_DEPTHS = {"resnet8": 1, "resnet14": 2, "resnet20": 3, "resnet32": 5, "resnet56": 9, "resnet110": 18}


def build_template(name: str, input_shape, n_classes: int, rng=None, widths=None, **kw) -> LayerGraph:
    """Look up a graph template by name (``resnet8`` ... ``resnet110``, ``mlp``)."""
    if name in RESNET_DEPTHS:
        return resnet(RESNET_DEPTHS[name], tuple(input_shape), n_classes,
                      tuple(widths) if widths else (16, 32, 64), rng, name)
    if name == "mlp":
        dim = int(np.prod(input_shape))
        return mlp(dim, tuple(widths) if widths else (32, 32, 32), n_classes, rng, **kw)
    raise ValueError(f"unknown graph template {name!r}; choose from {sorted(RESNET_DEPTHS) + ['mlp']}")


# ----------------------------------------------------------------- splitting

def split_counts(n_layers: int, k: int) -> list[int]:
    """Layers per module for an equal split; earlier modules get one fewer when uneven."""
    if k < 1 or n_layers < 1:
        raise ValueError(f"need positive n_layers and K, got {n_layers}, {k}")
    if k > n_layers:
        raise ValueError(f"K={k} exceeds the number of basic layers ({n_layers})")
    base, extra = divmod(n_layers, k)
    return [base] * (k - extra) + [base + 1] * extra


def counts_to_slices(counts) -> list[slice]:
    out, start = [], 0
    for c in counts:
        out.append(slice(start, start + c))
        start += c
    return out


def split_balanced_memory(costs, k: int, module_cost=None) -> list[slice]:
    """Contiguous K-partition minimising the largest module cost.

    ``costs`` are per-layer activation costs.  ``module_cost(i, j)``, if given,
    replaces the plain sum ``costs[i:j]`` (e.g. to add auxiliary-net overhead).
    Among optimal partitions the one with the earliest boundaries wins.
    """
    costs = list(costs)
    n = len(costs)
    if k < 1 or k > n:
        raise ValueError(f"K={k} must be in [1, {n}]")
    prefix = np.concatenate([[0], np.cumsum(costs)])
    cost = module_cost or (lambda i, j: prefix[j] - prefix[i])
    inf = float("inf")
    # best[m][i]: minimal max cost of splitting layers i..n-1 into m modules
    best = [[inf] * (n + 1) for _ in range(k + 1)]
    best[0][n] = 0.0
    for m in range(1, k + 1):
        for i in range(n - m, -1, -1):
            b = inf
            for j in range(i + 1, n - m + 2):
                if best[m - 1][j] == inf:
                    continue
                b = min(b, max(cost(i, j), best[m - 1][j]))
            best[m][i] = b
    target = best[k][0]
    slices, i = [], 0
    for m in range(k, 0, -1):
        for j in range(i + 1, n - m + 2):
            if cost(i, j) <= target and best[m - 1][j] <= target:
                slices.append(slice(i, j))
                i = j
                break
    return slices


# ----------------------------------------------------------------- loss coefficients

def interpolate_lambdas(l1_first: float, l2_first: float, l1_last: float, l2_last: float, k: int) -> list[tuple[float, float]]:
    """Linearly interpolated (lambda1, lambda2) for local modules 1..K-1."""
    if min(l1_first, l2_first, l1_last, l2_last) < 0:
        raise ValueError("lambda endpoints must be non-negative")
    if k < 2:
        raise ValueError(f"interpolation needs K >= 2, got {k}")
    if k == 2:
        log.info("K=2: single local module uses the first-module lambdas")
        return [(float(l1_first), float(l2_first))]
    out = []
    for m in range(k - 1):
        t = m / (k - 2)
        out.append((l1_first + (l1_last - l1_first) * t, l2_first + (l2_last - l2_first) * t))
    return out


def alpha_beta_to_lambdas(alpha: float, beta: float) -> tuple[float, float]:
    """lambda1 = alpha * (1 - beta), lambda2 = alpha * beta."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return alpha * (1.0 - beta), alpha * beta


# ----------------------------------------------------------------- local modules

@dataclass
class LocalModule:
    """A contiguous slice of basic layers plus whatever it is trained with.

    Local modules carry a decoder and a label head (classifier, projection or
    linear); the last module carries the network's classifier head and is
    trained with plain cross-entropy.
    """
    index: int
    layers: list[BasicLayer]
    lambda1: float = 0.0
    lambda2: float = 0.0
    variant: str = "softmax"
    decoder: Module | None = None
    label_head: Module | None = None
    is_last: bool = False
    tau: float = 0.07
    _nets: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"module {self.index}: lambdas must be >= 0")
        self._nets = [layer.net for layer in self.layers]

    @property
    def in_shape(self):
        return self.layers[0].in_shape

    @property
    def out_shape(self):
        return self.layers[-1].out_shape

    def forward(self, x):
        for net in self._nets:
            x = net(x)
        return x

    __call__ = forward

    def body_modules(self) -> list[Module]:
        return list(self._nets)

    def aux_modules(self) -> list[Module]:
        return [m for m in (self.decoder, self.label_head) if m is not None]

    def all_modules(self) -> list[Module]:
        return self.body_modules() + self.aux_modules()

    def parameters(self):
        out = []
        for m in self.all_modules():
            out.extend(m.parameters())
        return out

    def train(self, mode=True):
        for m in self.all_modules():
            m.train(mode)

    def eval(self):
        self.train(False)


def build_local_modules(graph: LayerGraph, slices, lambdas=None, variant: str = "softmax",
                        head: str = "conv_mlp", image_shape=None, n_label_classes: int | None = None,
                        tau: float = 0.07, width_scale: float = 1.0, projection_dim: int = aux_nets.PROJECTION_DIM,
                        rng=None) -> list[LocalModule]:
    """Attach auxiliary nets to each slice of ``graph``.

    ``variant`` is ``softmax`` or ``contrast``; ``head`` selects the softmax
    label head: ``conv_mlp`` (conv + 2-layer MLP) or ``linear`` (pool + FC).
    Terms whose coefficient is zero get no auxiliary net.
    """
    if variant not in ("softmax", "contrast"):
        raise ValueError(f"unknown loss variant {variant!r}")
    if head not in ("conv_mlp", "linear"):
        raise ValueError(f"unknown head {head!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    k = len(slices)
    lambdas = list(lambdas or [])
    if len(lambdas) != k - 1:
        raise ValueError(f"need {k - 1} lambda pairs for K={k}, got {len(lambdas)}")
    image_shape = tuple(image_shape or graph.input_shape)
    n_cls = n_label_classes or graph.n_classes
    image_hw = image_shape[-1] if len(image_shape) == 3 else None
    modules = []
    for i, sl in enumerate(slices):
        layers = graph.layers[sl]
        if i == k - 1:
            mod = LocalModule(i + 1, layers + [graph.head], is_last=True, tau=tau)
            modules.append(mod)
            continue
        l1, l2 = lambdas[i]
        feat = layers[-1].out_shape
        decoder = aux_nets.build_decoder(feat, image_shape, width_scale, rng) if l1 > 0 else None
        label_head = None
        if l2 > 0:
            if variant == "contrast":
                label_head = aux_nets.build_classifier_or_projection(feat, projection_dim, "projection",
                                                                     width_scale, rng, image_hw)
            elif head == "linear":
                label_head = aux_nets.build_linear_head(feat, n_cls, rng)
            else:
                label_head = aux_nets.build_classifier_or_projection(feat, n_cls, "classifier",
                                                                     width_scale, rng, image_hw)
        modules.append(LocalModule(i + 1, layers, l1, l2, variant, decoder, label_head, tau=tau))
    return modules
