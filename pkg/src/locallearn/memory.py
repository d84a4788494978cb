"""Activation-memory accounting in saved-activation elements.

``account`` predicts, from shapes alone, how many activation elements are
held for backward at the worst point of a training step; ``measure_live_peak``
runs a real step with the tape instrumented.  Parameters and optimizer state
are not counted.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import LayerGraph, LocalModule
from .losses import loss_saved_elements
from .nn import saved_total

BYTES_PER_ELEMENT = 8


@dataclass
class MemoryReport:
    per_module: list[int]
    per_module_aux: list[int]
    peak: int
    e2e_peak: int
    ratio: float

    @property
    def peak_bytes(self) -> int:
        return self.peak * BYTES_PER_ELEMENT

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _prod(shape) -> int:
    return int(np.prod(shape))


def layer_costs(graph: LayerGraph, batch_size: int) -> list[int]:
    """Saved elements of each basic layer for one training batch."""
    return [saved_total(layer.net, layer.in_shape, batch_size) for layer in graph.layers]


def head_cost(graph: LayerGraph, batch_size: int) -> int:
    h = graph.head
    return saved_total(h.net, h.in_shape, batch_size) + loss_saved_elements("ce", batch_size, graph.n_classes)


def aux_cost(module: LocalModule, batch_size: int, image_shape) -> int:
    """Saved elements of a local module's auxiliary nets and their losses."""
    feat = module.out_shape
    n = 0
    if module.decoder is not None and module.lambda1 > 0:
        n += saved_total(module.decoder, feat, batch_size)
        n += loss_saved_elements("bce", batch_size, _prod(image_shape))
    if module.label_head is not None and module.lambda2 > 0:
        n += saved_total(module.label_head, feat, batch_size)
        out = module.label_head.out_shape(feat)[0]
        n += loss_saved_elements("contrast" if module.variant == "contrast" else "ce", batch_size, out)
    return n


def account(graph: LayerGraph, slices, batch_size: int, include_aux: bool = False,
            modules: list[LocalModule] | None = None, image_shape=None) -> MemoryReport:
    """Peak saved-activation elements under local training vs. end-to-end training.

    End-to-end keeps every layer's saves (plus the head and its loss) alive at
    once; local training only ever holds one module's graph, including that
    module's auxiliary nets when ``include_aux`` is set (``modules`` must then
    be given).
    """
    costs = layer_costs(graph, batch_size)
    head = head_cost(graph, batch_size)
    e2e = sum(costs) + head
    image_shape = image_shape or graph.input_shape
    per, per_aux = [], []
    for i, sl in enumerate(slices):
        body = sum(costs[sl])
        if i == len(slices) - 1:
            body += head
        extra = 0
        if include_aux:
            if modules is None:
                raise ValueError("include_aux requires the built local modules")
            if not modules[i].is_last:
                extra = aux_cost(modules[i], batch_size, image_shape)
        per.append(body)
        per_aux.append(extra)
    peak = max(b + a for b, a in zip(per, per_aux))
    return MemoryReport(per, per_aux, peak, e2e, peak / e2e)


def split_peak_ratio(costs, slices) -> float:
    """Largest slice total over the grand total, for plain per-layer costs."""
    costs = list(costs)
    return max(sum(costs[sl]) for sl in slices) / sum(costs)


def uniform_ratio(n_layers: int, k: int) -> float:
    """Closed-form peak ratio for equal per-layer costs, no head and no auxiliary nets."""
    return math.ceil(n_layers / k) / n_layers


def measure_live_peak(model, x: np.ndarray, y: np.ndarray, mode: str = "simultaneous") -> int:
    """Run one training step with the tape instrumented and return the live peak.

    Parameters are left untouched: gradients are computed but no update is
    applied, and batch-norm running buffers are restored afterwards.
    """
    from .losses import e2e_loss, infopro_module_loss
    from .nn import state_dict, load_state

    saved = [[state_dict(net) for net in m.all_modules()] for m in model.modules]
    try:
        if mode in ("simultaneous", "async"):
            with ad.track_memory() as tr:
                h = Tensor(x)
                for m in model.modules:
                    out = m(h)
                    loss = e2e_loss(out, y) if m.is_last else infopro_module_loss(m, out, x, y).total
                    ad.backward(loss)
                    h = ad.detach(out)
                    # async stages see the same per-module graph on cached inputs
            peak = tr.peak
        else:
            raise ValueError(f"live-peak measurement supports simultaneous/async, got {mode!r}")
    finally:
        for m, st in zip(model.modules, saved):
            for net, s in zip(m.all_modules(), st):
                load_state(net, s)
            for p in m.parameters():
                p.zero_grad()
    return peak


@dataclass
class SweepPoint:
    k: int
    peak: int
    ratio: float


def k_sweep(plan, input_shape, n_classes: int, x: np.ndarray, y: np.ndarray, ks=(1, 2, 4, 8)):
    """Measured peak (auxiliary nets included) for each K, relative to the first entry of ``ks``.

    Returns the sweep and the first K at which the ratio rises again
    (auxiliary overhead outweighing the shorter module), or None.
    """
    from .train import TrainPlan, build_model

    points = []
    base = None
    for k in ks:
        p = TrainPlan.from_dict({**plan.to_dict(), "k": k, "mode": "simultaneous"})
        peak = measure_live_peak(build_model(p, input_shape, n_classes), x, y)
        base = base or peak
        points.append(SweepPoint(k, peak, peak / base))
    crossover = next((b.k for a, b in zip(points, points[1:]) if b.ratio > a.ratio), None)
    return points, crossover
