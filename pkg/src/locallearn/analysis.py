"""Post-hoc probes on frozen features: reconstruction, classification and linear separability.

All probes work on precomputed feature arrays, so the probed network is never
touched; ``*_at`` helpers extract those features from a trained model.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .aux_nets import build_decoder
from .losses import prop2_gap_bound
from .nn import BatchNorm, Conv2d, GlobalAvgPool, Linear, ReLU, Sequential, Upsample
from .optim import SGD, Adam, cosine_lr

log = logging.getLogger(__name__)


@dataclass
class ProbeBudget:
    decoder_epochs: int = 10
    classifier_epochs: int = 15
    linear_epochs: int = 60
    batch_size: int = 64
    classifier_lr: float = 0.05
    linear_lr: float = 0.05


@dataclass
class MIReport:
    layer: int
    i_hx: float
    i_hy: dict[str, float]
    linear_probe_error: float
    seeds: list[int]
    budget: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _batches(n: int, bs: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + bs] for i in range(0, n, bs)]


def _eval_forward(net, x: np.ndarray, bs: int = 512) -> np.ndarray:
    net.eval()
    outs = []
    with ad.no_grad():
        for s in range(0, len(x), bs):
            outs.append(net(Tensor(x[s:s + bs])).data)
    net.train()
    return np.concatenate(outs)


# ----------------------------------------------------------------- I(h, x)

def estimate_ihx(h_train: np.ndarray, x_train: np.ndarray, h_test: np.ndarray, x_test: np.ndarray,
                 epochs: int = 10, seed: int = 0, batch_size: int = 64, width_scale: float = 1.0) -> float:
    """1 - mean per-pixel BCE of a freshly trained decoder on held-out data.

    The decoder has the auxiliary-decoder architecture and is trained with
    Adam at its default settings.
    """
    rng = np.random.default_rng([seed, 11])
    dec = build_decoder(h_train.shape[1:], x_train.shape[1:], width_scale, rng)
    opt = Adam(dec.parameters())
    for _ in range(epochs):
        for b in _batches(len(h_train), batch_size, rng):
            opt.zero_grad()
            loss = ad.binary_cross_entropy(dec(Tensor(h_train[b])), x_train[b])
            ad.backward(loss)
            opt.step()
    pred = _eval_forward(dec, h_test)
    p = np.clip(pred, 1e-300, 1.0)
    q = np.clip(1.0 - pred, 1e-300, 1.0)
    bce = -(x_test * np.log(p) + (1.0 - x_test) * np.log(q)).mean()
    return float(1.0 - bce)


def constant_predictor_bce(x_train: np.ndarray, x_test: np.ndarray) -> float:
    """BCE on ``x_test`` of the best input-independent reconstruction (the training mean image)."""
    m = np.clip(x_train.mean(axis=0), 1e-12, 1 - 1e-12)
    return float(-(x_test * np.log(m) + (1 - x_test) * np.log(1 - m)).mean())


# ----------------------------------------------------------------- I(h, y)

def build_probe_cnn(feature_shape, n_classes: int, image_hw: int | None, rng) -> Sequential:
    """Small conv classifier for feature maps: resize, two strided conv-BN-ReLU, pool, linear."""
    if len(feature_shape) == 1:
        return Sequential(Linear(feature_shape[0], 64, rng), ReLU(), Linear(64, n_classes, rng))
    c, h, w = feature_shape
    layers = []
    size = image_hw or h
    if (h, w) != (size, size):
        layers.append(Upsample((size, size)))
    layers += [Conv2d(c, 16, 3, 2, rng), BatchNorm(16), ReLU(),
               Conv2d(16, 32, 3, 2 if size >= 8 else 1, rng), BatchNorm(32), ReLU(),
               GlobalAvgPool(), Linear(32, n_classes, rng)]
    return Sequential(*layers)


def estimate_ihy(h_train: np.ndarray, y_train: np.ndarray, h_test: np.ndarray, y_test: np.ndarray,
                 n_classes: int, epochs: int = 8, seed: int = 0, batch_size: int = 64, lr: float = 0.05,
                 image_hw: int | None = None) -> float:
    """Held-out accuracy of a freshly trained convnet probe on the features."""
    rng = np.random.default_rng([seed, 12])
    net = build_probe_cnn(h_train.shape[1:], n_classes, image_hw, rng)
    opt = SGD(net.parameters(), lr, 0.9, True, 1e-4)
    batches = [b for _ in range(epochs) for b in _batches(len(h_train), batch_size, rng)]
    for t, b in enumerate(batches):
        opt.zero_grad()
        loss = ad.cross_entropy(net(Tensor(h_train[b])), y_train[b])
        ad.backward(loss)
        opt.step(cosine_lr(t, len(batches), lr))
    pred = _eval_forward(net, h_test).argmax(axis=1)
    return float(np.mean(pred == y_test))


def linear_probe(h_train: np.ndarray, y_train: np.ndarray, h_test: np.ndarray, y_test: np.ndarray,
                 n_classes: int, epochs: int = 60, seed: int = 0, lr: float = 0.05, batch_size: int = 64,
                 pool: bool = True) -> float:
    """Test error of a linear softmax classifier on (pooled) features.

    Feature maps are globally average-pooled unless ``pool=False``, in which
    case they are flattened.  Features are standardised with training-set
    statistics.
    """
    def prep(h):
        if h.ndim == 4:
            return h.mean(axis=(2, 3)) if pool else h.reshape(len(h), -1)
        return h.reshape(len(h), -1)

    a, b_ = prep(h_train), prep(h_test)
    mu, sd = a.mean(axis=0), a.std(axis=0) + 1e-8
    a, b_ = (a - mu) / sd, (b_ - mu) / sd
    rng = np.random.default_rng([seed, 13])
    lin = Linear(a.shape[1], n_classes, rng)
    opt = Adam(lin.parameters(), lr)
    for _ in range(epochs):
        for idx in _batches(len(a), batch_size, rng):
            opt.zero_grad()
            ad.backward(ad.cross_entropy(lin(Tensor(a[idx])), y_train[idx]))
            opt.step()
    with ad.no_grad():
        pred = lin(Tensor(b_)).data.argmax(axis=1)
    return float(np.mean(pred != y_test))


# ----------------------------------------------------------------- features from a trained model

def layer_features(model, x: np.ndarray, layer: int, batch_size: int = 256) -> np.ndarray:
    """Eval-mode output after the first ``layer`` basic layers (0 = the input itself)."""
    if layer == 0:
        return np.asarray(x, dtype=np.float64)
    nets = [l.net for l in model.graph.layers[:layer]]
    for n in nets:
        n.eval()
    outs = []
    with ad.no_grad():
        for s in range(0, len(x), batch_size):
            h = Tensor(x[s:s + batch_size])
            for n in nets:
                h = n(h)
            outs.append(h.data)
    for n in nets:
        n.train()
    return np.concatenate(outs)


def module_end_layers(model) -> list[int]:
    """Basic-layer index at the end of each local module except the last."""
    out, n = [], 0
    for m in model.modules[:-1]:
        n += len(m.layers)
        out.append(n)
    return out


def probe_layer(model, layer: int, x_train, x_test, labels_train: dict, labels_test: dict, n_classes: dict,
                target: str, budget: ProbeBudget | None = None, seed: int = 0, with_ihx: bool = True) -> MIReport:
    """All three probes on one layer of a frozen model."""
    budget = budget or ProbeBudget()
    htr, hte = layer_features(model, x_train, layer), layer_features(model, x_test, layer)
    hw = x_train.shape[-1] if x_train.ndim == 4 else None
    ihx = estimate_ihx(htr, x_train, hte, x_test, budget.decoder_epochs, seed, budget.batch_size) if with_ihx else float("nan")
    ihy = {k: estimate_ihy(htr, labels_train[k], hte, labels_test[k], n_classes[k], budget.classifier_epochs, seed,
                           budget.batch_size, budget.classifier_lr, hw) for k in labels_train}
    err = linear_probe(htr, labels_train[target], hte, labels_test[target], n_classes[target],
                       budget.linear_epochs, seed, budget.linear_lr, budget.batch_size)
    return MIReport(layer, ihx, ihy, err, [seed], asdict(budget))


def reports_csv(reports: list[MIReport], target: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    keys = sorted({k for r in reports for k in r.i_hy})
    w.writerow(["layer", "linear_probe_error", "i_hx"] + [f"i_hy_{k}" for k in keys])
    for r in reports:
        w.writerow([r.layer, repr(r.linear_probe_error), repr(r.i_hx)] + [repr(r.i_hy.get(k, float("nan"))) for k in keys])
    return buf.getvalue()


def reports_json(reports: list[MIReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


# ----------------------------------------------------------------- gap bound over training

@dataclass
class GapTrajectory:
    steps: list[int]
    bounds: list[float]
    first_quartile_mean: float
    last_quartile_mean: float

    @property
    def shrinks(self) -> bool:
        return self.last_quartile_mean < self.first_quartile_mean


def gap_trajectory(steps, i_hy_series, i_xy: float, lambda2: float) -> GapTrajectory:
    """Series lambda2 * (I(x,y) - I(h,y)(t)) and its first- vs last-quartile means."""
    bounds = [prop2_gap_bound(lambda2, i_xy, v) for v in i_hy_series]
    n = len(bounds)
    if n == 0:
        raise ValueError("empty series")
    q = max(1, math.ceil(n / 4))
    return GapTrajectory(list(steps), bounds, float(np.mean(bounds[:q])), float(np.mean(bounds[-q:])))


def margin_rule(lower: list[float], higher: list[float], factor: float = 2.0) -> tuple[bool, float, float]:
    """Whether mean(higher) - mean(lower) exceeds ``factor`` pooled standard deviations.

    Returns (passed, margin, threshold).
    """
    lo, hi = np.asarray(lower, float), np.asarray(higher, float)
    pooled = math.sqrt((lo.var(ddof=1) + hi.var(ddof=1)) / 2) if len(lo) > 1 and len(hi) > 1 else 0.0
    margin = float(hi.mean() - lo.mean())
    return margin > factor * pooled, margin, factor * pooled
