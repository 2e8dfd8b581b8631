"""Motion-guided attention fusion: object features gate an RGB feature map."""
from __future__ import annotations

import math

import numpy as np

from .autograd import Module, layer_norm, matmul, pool, relu, resample_time, sigmoid, softmax
from .autograd.module import Init, ones, zeros
from .autograd.ops import mul, reshape, swap_last


class MgafWeights(Module):
    """Projections ``W_z (C_M x C)``, ``W_U (C_U x C)``, ``W_uz (C x C_M)`` and a layer norm over C."""

    def __init__(self, video_channels, object_channels, width=None, init=None, name="mgaf"):
        init = init or Init(0)
        width = width or min(video_channels, object_channels)
        self.W_z = init.xavier(f"{name}.W_z", (video_channels, width), video_channels, width)
        self.W_U = init.xavier(f"{name}.W_U", (object_channels, width), object_channels, width)
        self.W_uz = init.xavier(f"{name}.W_uz", (width, video_channels), width, video_channels)
        self.ln_gain = ones(width)
        self.ln_bias = zeros(width)

    @property
    def width(self):
        return self.W_z.shape[1]

    @property
    def video_channels(self):
        return self.W_z.shape[0]

    @property
    def object_channels(self):
        return self.W_U.shape[0]


def spatial_collapse(f):
    """Average each frame's ``H x W`` map: ``(..., T, H, W, C) -> (..., T, C)``."""
    return pool(f, "spatial_avg")


def attend(z, U, w, return_weights=False):
    """Cross-modal attention of frame queries ``z`` over object-feature keys ``U``.

    Softmax runs over the key (object time) axis, so every output row is a
    convex combination of the rows of ``U @ W_U``.
    """
    if z.shape[-1] != w.video_channels:
        raise ValueError(f"query width {z.shape[-1]} != W_z rows {w.video_channels}")
    if U.shape[-1] != w.object_channels:
        raise ValueError(f"object feature width {U.shape[-1]} != W_U rows {w.object_channels}")
    q = matmul(z, w.W_z)
    v = matmul(U, w.W_U)
    logits = matmul(q, swap_last(v)) * (1.0 / math.sqrt(w.width))
    attn = softmax(logits, axis=-1)
    out = matmul(attn, v)
    return (out, attn) if return_weights else out


def gate(z, U, w, return_weights=False):
    """Per-(time, channel) gate in (0, 1) of shape ``(..., T, C_M)``."""
    if U.shape[-2] != z.shape[-2]:
        U = resample_time(U, z.shape[-2])
    a, attn = attend(z, U, w, return_weights=True)
    g = sigmoid(matmul(relu(layer_norm(a, w.ln_gain, w.ln_bias)), w.W_uz))
    return (g, attn) if return_weights else g


def mgaf_forward(f, U, w, diagnostics=None):
    """Re-weight ``f`` (``..., T, H, W, C_M``) by a gate computed from its pooled frames and ``U``.

    ``U`` of a different length is linearly resampled to ``T`` first. If a dict
    is passed as ``diagnostics``, gate mean and attention entropy are recorded.
    """
    z = spatial_collapse(f)
    g, attn = gate(z, U, w, return_weights=True)
    if diagnostics is not None:
        p = attn.data
        diagnostics["gate_mean"] = float(g.data.mean())
        diagnostics["attention_entropy"] = float(-(p * np.log(p + 1e-30)).sum(axis=-1).mean())
    gshape = g.shape[:-1] + (1, 1, g.shape[-1])
    return mul(f, reshape(g, gshape))
