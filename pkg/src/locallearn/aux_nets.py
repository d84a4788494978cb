"""Auxiliary networks attached to a local module: decoder, classifier, projection head."""

from __future__ import annotations

import math

from .nn import (BatchNorm, Conv2d, Flatten, GlobalAvgPool, L2Normalize, Linear, ReLU,
                 Sequential, Sigmoid, Upsample, conv_bn_relu)

DECODER_CHANNELS = 12
HIDDEN = 128
PROJECTION_DIM = 32


def scaled(width: int, width_scale: float) -> int:
    return max(1, math.ceil(width * width_scale))


def build_decoder(feature_shape, image_shape, width_scale: float = 1.0, rng=None) -> Sequential:
    """Reconstruct the input image from a feature map.

    Bilinear resize to the image resolution, a 3x3 conv-BN-ReLU with 12 (scaled)
    channels, then a 3x3 conv to the image channels and a sigmoid.  Vector
    features use a two-layer MLP ending in a sigmoid instead.
    """
    hidden = scaled(DECODER_CHANNELS, width_scale)
    if len(feature_shape) == 1:
        out = 1
        for d in image_shape:
            out *= d
        return Sequential(Linear(feature_shape[0], scaled(HIDDEN, width_scale), rng), ReLU(),
                          Linear(scaled(HIDDEN, width_scale), out, rng), Sigmoid())
    c, h, w = feature_shape
    ic, ih, iw = image_shape
    if h > ih or w > iw:
        raise ValueError(f"decoder: feature {feature_shape} larger than image {image_shape}")
    return Sequential(Upsample((ih, iw)),
                      Conv2d(c, hidden, 3, 1, rng), BatchNorm(hidden), ReLU(),
                      Conv2d(hidden, ic, 3, 1, rng), Sigmoid())


def _conv_plan(feature_hw: int, image_hw: int) -> tuple[int, int]:
    """(stride, channels) of the head's conv for a feature of the given size."""
    stride = 2 if feature_hw > 8 else 1
    channels = 32 if feature_hw >= image_hw else 64
    return stride, channels


def build_classifier_or_projection(feature_shape, n_out: int, role: str = "classifier",
                                   width_scale: float = 1.0, rng=None, image_hw: int | None = None) -> Sequential:
    """One conv layer, global pooling and a two-layer MLP.

    ``role='classifier'`` ends in ``n_out`` logits; ``role='projection'`` ends
    in an ``n_out``-dim vector scaled to unit L2 norm.
    """
    if role not in ("classifier", "projection"):
        raise ValueError(f"unknown head role {role!r}")
    hidden = scaled(HIDDEN, width_scale)
    if len(feature_shape) == 1:
        layers = [Linear(feature_shape[0], hidden, rng), ReLU(), Linear(hidden, n_out, rng)]
    else:
        c, h, _ = feature_shape
        stride, ch = _conv_plan(h, image_hw if image_hw is not None else h)
        ch = scaled(ch, width_scale)
        layers = [*conv_bn_relu(c, ch, stride, rng).layers, GlobalAvgPool(),
                  Linear(ch, hidden, rng), ReLU(), Linear(hidden, n_out, rng)]
    if role == "projection":
        layers.append(L2Normalize())
    return Sequential(*layers)


def build_linear_head(feature_shape, n_classes: int, rng=None) -> Sequential:
    """Global pooling (for feature maps) followed by a single linear layer."""
    if len(feature_shape) == 1:
        return Sequential(Linear(feature_shape[0], n_classes, rng))
    return Sequential(GlobalAvgPool(), Linear(feature_shape[0], n_classes, rng))


def build_flat_linear_head(feature_shape, n_classes: int, rng=None) -> Sequential:
    d = 1
    for s in feature_shape:
        d *= s
    return Sequential(Flatten(), Linear(d, n_classes, rng))
