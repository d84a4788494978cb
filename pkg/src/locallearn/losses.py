"""Training objectives for local modules and the end-to-end head."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.07


@dataclass
class LossBreakdown:
    """Total local loss and its two weighted parts (plain floats alongside the graph node)."""
    total: Tensor
    reconstruction_term: float
    label_term: float
    variant: str

    @property
    def value(self) -> float:
        return self.total.item()


def reconstruction_loss(decoder, h: Tensor, x) -> Tensor:
    """Mean per-pixel binary cross-entropy of ``decoder(h)`` against ``x``."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xd.size and (xd.min() < 0.0 or xd.max() > 1.0):
        raise ValueError(f"reconstruction target must lie in [0, 1], got range [{xd.min()}, {xd.max()}]")
    pred = decoder(h)
    return ad.binary_cross_entropy(pred, xd.reshape(pred.shape))


def softmax_label_loss(classifier, h: Tensor, y) -> Tensor:
    return ad.cross_entropy(classifier(h), y)


def positive_mask(y) -> np.ndarray:
    y = np.asarray(y)
    same = y[:, None] == y[None, :]
    np.fill_diagonal(same, False)
    return same


def contrastive_loss(z: Tensor, y, tau: float = DEFAULT_TAU) -> Tensor:
    """Supervised contrastive loss over a batch of projections.

    Averages ``-log softmax_k!=i(z_i . z_k / tau)[j]`` over all ordered pairs
    i != j that share a label.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    y = np.asarray(y)
    n = z.shape[0]
    if n < 2 or z.ndim != 2 or y.shape != (n,):
        raise ValueError(f"contrastive_loss: need N >= 2 projections with N labels, got {z.shape} and {y.shape}")
    pos = positive_mask(y)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("degenerate batch: no pair of distinct samples shares a label")
    sim = ad.scale(ad.matmul(z, ad.transpose(z)), 1.0 / tau)
    logp = ad.log_softmax(sim, mask=~np.eye(n, dtype=bool))
    return ad.scale(ad.tsum(ad.mul(logp, pos.astype(np.float64))), -1.0 / n_pos)


def e2e_loss(logits: Tensor, y) -> Tensor:
    return ad.cross_entropy(logits, y)


def infopro_module_loss(module, h: Tensor, x, y) -> LossBreakdown:
    """lambda1 * reconstruction + lambda2 * (cross-entropy | contrastive) for a local module.

    ``h`` is the module's output with its graph attached; the caller detaches
    it before feeding the next module.  Terms with a zero coefficient are not
    evaluated at all.
    """
    if module.is_last:
        raise ValueError("the last module is trained with the end-to-end loss")
    total = None
    rec = lab = 0.0
    if module.lambda1 > 0:
        r = ad.scale(reconstruction_loss(module.decoder, h, x), module.lambda1)
        rec = r.item()
        total = r
    if module.lambda2 > 0:
        if module.variant == "contrast":
            l_ = contrastive_loss(module.label_head(h), y, module.tau)
        else:
            l_ = softmax_label_loss(module.label_head, h, y)
        l_ = ad.scale(l_, module.lambda2)
        lab = l_.item()
        total = l_ if total is None else ad.add(total, l_)
    if total is None:
        raise ValueError(f"module {module.index}: lambda1 = lambda2 = 0 leaves nothing to train")
    return LossBreakdown(total, rec, lab, module.variant)


def prop2_gap_bound(lambda2: float, i_xy: float, i_hy: float) -> float:
    """Upper bound lambda2 * (I(x,y) - I(h,y)) on the surrogate's gap, clamped at 0."""
    if not (math.isfinite(i_xy) and math.isfinite(i_hy)):
        raise ValueError("information estimates must be finite")
    gap = lambda2 * (i_xy - i_hy)
    if gap < 0:
        log.warning("negative gap estimate %.4g (estimator noise); clamping to 0", gap)
        return 0.0
    return gap


def loss_saved_elements(kind: str, batch: int, width: int) -> int:
    """Saved elements of a loss op for a batch.

    ``width`` is the number of classes (``ce``), the image size (``bce``) or
    the projection dimension (``contrast``).
    """
    if kind == "ce":
        return 2 * batch * width
    if kind == "bce":
        return 2 * batch * width
    if kind == "contrast":
        return 2 * batch * width + 2 * batch * batch
    raise ValueError(f"unknown loss kind {kind!r}")
