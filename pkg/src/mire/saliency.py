"""Grad-CAM activation maps and the merged, thresholded foreground mask.

The map for a (image, label, head) triple is the relu of the channel-weighted
sum of a conv layer's activations, where the channel weights are the spatial
means of the label logit's gradient w.r.t. those activations. Maps are
bilinearly upsampled to image resolution and min-max normalized to [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .imgops import bilinear_resize
from .tensor import Tensor


@dataclass
class SaliencyConfig:
    threshold: float = 0.2
    target_layer: int = -2      # index into the encoder conv stack

    def validate(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0,1), got {self.threshold}")


@dataclass
class ActivationMap:
    values: np.ndarray          # [H, W] in [0,1]
    kind: str                   # "class" | "domain"
    label: int


@dataclass
class ForegroundMask:
    values: np.ndarray          # [H, W]; 0 or in [threshold, 1]
    threshold: float


def grad_cam_batch(bundle, images, labels, kind, cfg=None):
    """Grad-CAM maps for a batch. images: [B,C,H,W]; labels: [B] ints.

    Returns a [B,H,W] array in [0,1]. Runs a private backward pass; parameter
    grads accumulated along the way are cleared afterwards.
    """
    cfg = cfg or SaliencyConfig()
    cfg.validate()
    head = {"class": bundle.class_head, "domain": bundle.domain_head}.get(kind)
    if head is None:
        raise ContractError(f"unknown grad_cam head kind '{kind}'")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= head.out_dim:
        raise ContractError(f"grad_cam label out of range for {kind} head")
    b, _, h, w = images.shape

    x = Tensor(images, requires_grad=True)
    feats = bundle.encoder.encode(x, retain_activation=cfg.target_layer)
    act = bundle.encoder.conv_activations[cfg.target_layer % len(
        bundle.encoder.conv_activations)]
    logits = head.classify(feats)
    picked = T.tsum(logits * Tensor(np.eye(head.out_dim)[labels]))
    T.backward(picked)

    grads = act.grad if act.grad is not None else np.zeros_like(act.data)
    weights = grads.mean(axis=(2, 3))                       # [B, ch]
    cam = np.maximum((weights[:, :, None, None] * act.data).sum(axis=1), 0.0)
    maps = np.empty((b, h, w))
    for i in range(b):
        up = bilinear_resize(cam[i], h, w)
        lo, hi = up.min(), up.max()
        maps[i] = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    bundle.zero_grad()
    return maps


def grad_cam(bundle, image, label, kind, cfg=None):
    """Single-image convenience wrapper returning an ActivationMap."""
    maps = grad_cam_batch(bundle, image[None], np.array([label]), kind, cfg)
    return ActivationMap(values=maps[0], kind=kind, label=int(label))


def merge_masks(mc, md, cfg=None):
    """Foreground mask: clamp(mc + md, 0, 1), then zero entries below the
    threshold; values at or above it stay soft."""
    cfg = cfg or SaliencyConfig()
    cfg.validate()
    a = mc.values if isinstance(mc, ActivationMap) else np.asarray(mc)
    b = md.values if isinstance(md, ActivationMap) else np.asarray(md)
    if a.shape != b.shape:
        raise ShapeError(f"merge_masks shape mismatch: {a.shape} vs {b.shape}")
    s = np.clip(a + b, 0.0, 1.0)
    s[s < cfg.threshold] = 0.0
    return ForegroundMask(values=s, threshold=cfg.threshold)
