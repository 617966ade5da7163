"""Coarse-to-fine feature network for one stream.

A small staged ConvNet (conv3x3 -> ReLU -> 2x2 max-pool per stage) feeds
1x1 side convolutions on a subset of stages. Each side conv emits one map
per granularity; the k-th maps of all side stages are upsampled to a common
size, stacked, flattened and projected by a granularity-specific FC layer
into the feature ``x_k``. Auxiliary heads (FC -> ReLU -> FC) classify each
``x_k`` during training. An LSTM with one unit per granularity then folds
``x_1 .. x_K`` from coarse to fine; its last hidden state is the stream
feature, and a per-unit FC head supplies the training logits.

With ``use_lstm=False`` and a single granularity the same class is the
frame-level baseline: its feature is ``x_1`` and the auxiliary head is the
classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .layers import Conv2d, Linear, LSTMCell, Module
from .tensor import Tensor


@dataclass
class GranularityFeatures:
    """Per-granularity features, coarsest first."""

    xs: list[Tensor]

    def __iter__(self):
        return iter(self.xs)

    def __len__(self):
        return len(self.xs)

    def __getitem__(self, k):
        return self.xs[k]


class CoarseToFineNet(Module):
    def __init__(self, cfg: ModelConfig, input_shape: tuple[int, int, int], n_classes: int,
                 rng: np.random.Generator, granularities: int | None = None, use_lstm: bool = True):
        super().__init__()
        self.cfg = cfg
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.granularities = granularities or cfg.granularities
        self.use_lstm = use_lstm
        self.fc1_relu = cfg.fc1_relu
        k = self.granularities
        c_in, h, w = input_shape

        sizes = []
        chans = [c_in] + list(cfg.stage_channels)
        for s in range(len(cfg.stage_channels)):
            if h < 1 or w < 1:
                raise ConfigError(f"input {input_shape} too small for {len(cfg.stage_channels)} stages")
            sizes.append((h, w))
            h, w = h // 2, w // 2
        self.side_stages = sorted(cfg.side_stages)
        if len(set(self.side_stages)) != len(self.side_stages):
            raise ConfigError("duplicate side stages")
        # stages after the deepest side tap are never used
        self.n_stages = max(self.side_stages)
        self.stage_sizes = sizes[: self.n_stages]
        base = self.stage_sizes[self.side_stages[0] - 1]
        self.up_factors = []
        for s in self.side_stages:
            sh, sw = self.stage_sizes[s - 1]
            if sh == 0 or sw == 0 or base[0] % sh or base[1] % sw or base[0] // sh != base[1] // sw:
                raise ConfigError(f"side stage {s} size {sh}x{sw} does not upsample evenly to {base}")
            self.up_factors.append(base[0] // sh)
        self.group_hw = base

        self.stages = [Conv2d(chans[i], chans[i + 1], 3, rng, padding=1) for i in range(self.n_stages)]
        self.side_convs = [Conv2d(chans[s], k, 1, rng) for s in self.side_stages]
        flat = len(self.side_stages) * base[0] * base[1]
        d = cfg.feature_dim
        self.fc1 = [Linear(flat, d, rng) for _ in range(k)]
        self.fc2 = [Linear(d, d, rng) for _ in range(k)]
        self.fc3 = [Linear(d, n_classes, rng) for _ in range(k)]
        if use_lstm:
            self.units = [LSTMCell(d, cfg.hidden, rng) for _ in range(k)]
            self.unit_heads = [Linear(cfg.hidden, n_classes, rng) for _ in range(k)]

    @property
    def feature_dim(self) -> int:
        return self.cfg.hidden if self.use_lstm else self.cfg.feature_dim

    # forward pieces ----------------------------------------------------------
    def extract(self, x: Tensor) -> GranularityFeatures:
        """Granularity features for a (B, C, H, W) batch (or one (C, H, W) input)."""
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1:] != self.input_shape:
            raise T.ShapeError(f"expected input {self.input_shape}, got {x.shape[1:]}")
        b = x.shape[0]
        side = []
        h = x
        for s, conv in enumerate(self.stages, start=1):
            a = T.relu(conv(h))
            if s in self.side_stages:
                i = self.side_stages.index(s)
                side.append(T.upsample_nearest(self.side_convs[i](a), self.up_factors[i]))
            if s < self.n_stages:
                h = T.max_pool2d(a)
        xs = []
        for k in range(self.granularities):
            group = T.concat([m[:, k:k + 1] for m in side], axis=1)
            feat = self.fc1[k](T.reshape(group, (b, -1)))
            if self.fc1_relu:
                feat = T.relu(feat)
            xs.append(T.reshape(feat, (feat.shape[1],)) if single else feat)
        return GranularityFeatures(xs)

    def granularity_logits(self, feats: GranularityFeatures) -> list[Tensor]:
        return [self.fc3[k](T.relu(self.fc2[k](x))) for k, x in enumerate(feats)]

    def integrate(self, feats: GranularityFeatures) -> tuple[Tensor, list[Tensor]]:
        """Fold features coarse to fine; returns the last hidden state and per-unit logits."""
        if not self.use_lstm:
            raise RuntimeError("this network has no integration LSTM")
        if len(feats) != self.granularities:
            raise T.ShapeError(f"expected {self.granularities} granularity features, got {len(feats)}")
        h = c = None
        logits = []
        for unit, head, x in zip(self.units, self.unit_heads, feats):
            h, c = unit(x, h, c)
            logits.append(head(h))
        return h, logits

    def forward(self, x: Tensor, heads: bool = True) -> dict:
        feats = self.extract(x)
        out = {"features": feats}
        if heads:
            out["granularity_logits"] = self.granularity_logits(feats)
        if self.use_lstm:
            h, unit_logits = self.integrate(feats)
            out["feature"] = h
            out["unit_logits"] = unit_logits
        else:
            out["feature"] = feats[0]
        return out

    __call__ = forward

    def final_logits(self, out: dict) -> Tensor:
        if self.use_lstm:
            return out["unit_logits"][-1]
        return out["granularity_logits"][-1]

    def predict(self, x: Tensor) -> np.ndarray:
        """Class probabilities from a softmax on the final head (no grouping involved)."""
        with T.no_grad():
            out = self.forward(x, heads=not self.use_lstm)
            return T.softmax_np(self.final_logits(out).data)


def standalone_softmax_predict(net: CoarseToFineNet, x: Tensor) -> np.ndarray:
    return net.predict(x)


# losses ----------------------------------------------------------------------

def _targets_mask(gt: np.ndarray, n_classes: int) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.int64)
    if gt.ndim != 1:
        raise ValueError("ground truth must be a 1-D array of labels")
    if np.any(gt < 0) or np.any(gt >= n_classes):
        raise ValueError(f"ground-truth label out of range for {n_classes} classes")
    mask = np.zeros((len(gt), n_classes))
    mask[np.arange(len(gt)), gt] = 1.0
    return mask


def granularity_loss(gran_logits: list[Tensor], group_masks: list[np.ndarray], alphas, n_classes: int) -> Tensor:
    """``-(1/N) sum_k alpha_k sum_{n in G_k} log p(n | k)``, averaged over the batch.

    ``group_masks[k]`` is a (B, N) 0/1 matrix marking G_k per row.
    """
    if len(gran_logits) != len(group_masks) or len(alphas) != len(gran_logits):
        raise ValueError("need one logits tensor, one group mask and one alpha per granularity")
    batch = gran_logits[0].shape[0]
    total = Tensor(0.0)
    for logits, mask, alpha in zip(gran_logits, group_masks, alphas):
        mask = np.asarray(mask, dtype=np.float64)
        if np.any(mask.sum(axis=1) == 0):
            raise ValueError("empty class group")
        if alpha == 0:
            continue
        total = total + T.softmax_cross_entropy(logits, mask, weight=alpha / n_classes)
    return total / batch


def c2f_lstm_loss(unit_logits: list[Tensor], gt, beta: float, n_classes: int) -> Tensor:
    """``-(beta/N) sum_t log p(gt | units 1..t)``, averaged over the batch."""
    if not unit_logits:
        raise ValueError("no unit logits")
    mask = _targets_mask(gt, n_classes)
    if beta == 0:
        return Tensor(0.0)
    total = Tensor(0.0)
    for logits in unit_logits:
        total = total + T.softmax_cross_entropy(logits, mask, weight=beta / n_classes)
    return total / mask.shape[0]


def c2f_total_loss(l_v: Tensor, l_l: Tensor) -> Tensor:
    return l_v + l_l


def gt_groups(gt, n_classes: int, count: int) -> list[np.ndarray]:
    """Every group is just the ground truth (the no-coarseness setting)."""
    m = _targets_mask(gt, n_classes)
    return [m.copy() for _ in range(count)]
