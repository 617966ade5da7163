"""Asynchronous two-stream fusion.

One anchor feature from one stream is paired with five features of the
other stream taken ``delta`` frames apart. Pair ``t`` is fused by its own
1x1 convolution over the two features viewed as a 2-channel 1-D map, and
the five fused vectors are folded by a five-unit LSTM whose per-unit heads
give class logits. ``delta = 0`` is synchronous fusion.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import Conv2d, Linear, LSTMCell, Module
from .tensor import ShapeError, Tensor

PERIOD_LENGTH = 5


def period_times(anchor: int, delta: int, align: str = "center") -> tuple[np.ndarray, int]:
    """Frame indices of the five other-stream inputs and the anchor for one period."""
    offsets = np.arange(PERIOD_LENGTH) - (PERIOD_LENGTH // 2 if align == "center" else 0)
    if align not in ("center", "left"):
        raise ValueError(f"unknown anchor alignment {align!r}")
    return anchor + delta * offsets, anchor


def anchor_range(n_frames: int, delta: int, align: str = "center") -> tuple[int, int]:
    """Inclusive range of anchor times whose period stays inside the video."""
    half = PERIOD_LENGTH // 2
    if align == "center":
        lo, hi = half * delta, n_frames - 1 - half * delta
    else:
        lo, hi = 0, n_frames - 1 - (PERIOD_LENGTH - 1) * delta
    if hi < lo:
        # the window is longer than the video; indices get clamped
        lo = hi = (n_frames - 1) // 2
    return lo, hi


def evaluation_anchors(n_frames: int, delta: int, periods: int, align: str = "center") -> np.ndarray:
    """``periods`` anchor times spaced uniformly over the valid range."""
    lo, hi = anchor_range(n_frames, delta, align)
    return np.rint(np.linspace(lo, hi, periods)).astype(np.int64)


def fuse_pair(fuser: Conv2d, anchor_feat: Tensor, other_feat: Tensor) -> Tensor:
    """Stack two feature vectors as a 2-channel map and apply a 1x1 convolution.

    Accepts (L,) or (B, L) features and returns (C_out * L,) or (B, C_out * L).
    """
    if anchor_feat.shape != other_feat.shape:
        raise ShapeError(f"feature shapes differ: {anchor_feat.shape} vs {other_feat.shape}")
    single = anchor_feat.ndim == 1
    if single:
        anchor_feat = T.reshape(anchor_feat, (1,) + anchor_feat.shape)
        other_feat = T.reshape(other_feat, (1,) + other_feat.shape)
    b, length = anchor_feat.shape
    pair = T.concat([T.reshape(anchor_feat, (b, 1, 1, length)), T.reshape(other_feat, (b, 1, 1, length))], axis=1)
    fused = fuser(pair)
    out = T.reshape(fused, (b, -1))
    return T.reshape(out, (out.shape[1],)) if single else out


class AsyncFusionNet(Module):
    def __init__(self, feature_dim: int, hidden: int, n_classes: int, rng: np.random.Generator,
                 fuser_channels: int = 1, share_fusers: bool = False, predict: str = "last"):
        super().__init__()
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.predict_rule = predict
        n_fusers = 1 if share_fusers else PERIOD_LENGTH
        self.fusers = [Conv2d(2, fuser_channels, 1, rng) for _ in range(n_fusers)]
        self.units = [LSTMCell(fuser_channels * feature_dim, hidden, rng) for _ in range(PERIOD_LENGTH)]
        self.heads = [Linear(hidden, n_classes, rng) for _ in range(PERIOD_LENGTH)]

    def fuser(self, t: int) -> Conv2d:
        return self.fusers[t % len(self.fusers)]

    def fuse(self, anchor_feat: Tensor, others: Sequence[Tensor]) -> list[Tensor]:
        if len(others) != PERIOD_LENGTH:
            raise ShapeError(f"a period needs {PERIOD_LENGTH} other-stream features, got {len(others)}")
        return [fuse_pair(self.fuser(t), anchor_feat, o) for t, o in enumerate(others)]

    def integrate(self, fused: Sequence[Tensor]) -> tuple[list[Tensor], np.ndarray]:
        """Per-unit logits and the period's class probabilities."""
        if len(fused) != PERIOD_LENGTH:
            raise ShapeError(f"expected {PERIOD_LENGTH} fused vectors, got {len(fused)}")
        h = c = None
        logits = []
        for unit, head, f in zip(self.units, self.heads, fused):
            h, c = unit(f, h, c)
            logits.append(head(h))
        return logits, self.prediction(logits)

    def prediction(self, logits: Sequence[Tensor]) -> np.ndarray:
        if self.predict_rule == "mean":
            return np.mean([T.softmax_np(l.data) for l in logits], axis=0)
        return T.softmax_np(logits[-1].data)

    def forward(self, anchor_feat: Tensor, others: Sequence[Tensor]):
        return self.integrate(self.fuse(anchor_feat, others))

    __call__ = forward


def async_loss(unit_logits: Sequence[Tensor], gt, gamma: float, n_classes: int) -> Tensor:
    """``-(gamma/N) sum_t log p(gt | units 1..t)``, averaged over the batch."""
    gt = np.atleast_1d(np.asarray(gt, dtype=np.int64))
    if np.any(gt < 0) or np.any(gt >= n_classes):
        raise ValueError(f"ground-truth label out of range for {n_classes} classes")
    if gamma == 0:
        return Tensor(0.0)
    total = Tensor(0.0)
    for logits in unit_logits:
        if logits.ndim == 1:
            total = total + T.softmax_cross_entropy(logits, [int(gt[0])], weight=gamma / n_classes)
        else:
            mask = np.zeros(logits.shape)
            mask[np.arange(len(gt)), gt] = 1.0
            total = total + T.softmax_cross_entropy(logits, mask, weight=gamma / n_classes)
    return total / len(gt)


def build_period_prediction(pred_a: np.ndarray, pred_b: np.ndarray) -> np.ndarray:
    """Sum of the two anchor-direction models' period scores."""
    pred_a, pred_b = np.asarray(pred_a), np.asarray(pred_b)
    if pred_a.shape[-1] != pred_b.shape[-1]:
        raise ShapeError(f"class counts differ: {pred_a.shape[-1]} vs {pred_b.shape[-1]}")
    return pred_a + pred_b
