"""Fixed, seeded two-layer convolutional trunk used as a stand-in feature extractor.

The trunk is forward-only: grad-weights are taken with respect to its output
feature maps, so nothing ever differentiates through it.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ShapeError

KERNEL = 3
STRIDE = 2
MIN_INPUT = 8


@dataclass(frozen=True)
class BackboneConfig:
    seed: int = 0
    channels: int = 64

    def __post_init__(self):
        if self.channels < 2:
            raise ValueError("backbone needs at least 2 channels")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @cached_property
    def weights(self):
        """(w1, b1, w2, b2) drawn once per config; scaled by 1/sqrt(fan-in), zero biases."""
        rng = np.random.default_rng(self.seed)
        k = self.channels
        w1 = rng.standard_normal((k, 1, KERNEL, KERNEL)) / np.sqrt(KERNEL * KERNEL)
        w2 = rng.standard_normal((k, k, KERNEL, KERNEL)) / np.sqrt(KERNEL * KERNEL * k)
        return w1, np.zeros(k), w2, np.zeros(k)


def conv_output_size(n: int) -> int:
    """Valid-padding 3x3 stride-2 output length: floor((n - 3) / 2) + 1."""
    return (n - KERNEL) // STRIDE + 1


def feature_size(n: int) -> int:
    """Spatial size after both convolutions, e.g. 32 -> 15 -> 7."""
    return conv_output_size(conv_output_size(n))


def _conv_relu(x, w, b):
    _, h, wd = x.shape
    ho, wo = conv_output_size(h), conv_output_size(wd)
    out = np.broadcast_to(b[:, None, None], (w.shape[0], ho, wo)).copy()
    for di in range(KERNEL):
        for dj in range(KERNEL):
            patch = x[:, di:di + STRIDE * (ho - 1) + 1:STRIDE, dj:dj + STRIDE * (wo - 1) + 1:STRIDE]
            out += np.einsum("oc,chw->ohw", w[:, :, di, dj], patch)
    return np.maximum(out, 0.0)


def backbone_forward(pixels, cfg: BackboneConfig) -> np.ndarray:
    """Map a 1 x H_in x W_in image to a K x H x W non-negative float32 feature map."""
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] != 1:
        raise ShapeError(f"expected a 1 x H x W image, got shape {x.shape}")
    if x.shape[1] < MIN_INPUT or x.shape[2] < MIN_INPUT:
        raise ShapeError(f"image must be at least {MIN_INPUT}x{MIN_INPUT}, got {x.shape[1:]}")
    w1, b1, w2, b2 = cfg.weights
    return _conv_relu(_conv_relu(x, w1, b1), w2, b2).astype(np.float32)
