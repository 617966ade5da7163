"""Per-stream backbone pre-training used to warm-start the stream networks.

A frame classifier with the stream network's convolution stages is trained
with plain softmax cross entropy on the frames inside each training video's
own signature window. Only the convolution stages are kept; side outputs,
fully connected layers and heads of the stream networks start fresh.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .c2f import CoarseToFineNet
from .config import Config
from .grouper import frame_items, labelled_frames
from .optim import SGD
from .tensor import Tensor

STAGE_PREFIX = "stages."


def stage_state(net: CoarseToFineNet) -> dict[str, np.ndarray]:
    return {k: v for k, v in net.state_dict().items() if k.startswith(STAGE_PREFIX)}


def load_stages(net: CoarseToFineNet, state: dict[str, np.ndarray]) -> None:
    """Copy pre-trained convolution stages into ``net`` (other parameters untouched)."""
    params = dict(net.named_parameters())
    expected = {k for k in params if k.startswith(STAGE_PREFIX)}
    if set(state) != expected:
        raise KeyError(f"backbone keys {sorted(state)} do not match the network's stages {sorted(expected)}")
    for k, v in state.items():
        if params[k].shape != v.shape:
            raise T.ShapeError(f"{k}: backbone shape {v.shape} != network shape {params[k].shape}")
        params[k].data = np.array(v, dtype=T.DTYPE)


def pretrain_backbone(dataset, cfg: Config, stream: str, seed: int | None = None):
    """Train a frame classifier on ``stream`` and return ``(stage_state, info)``."""
    bc = cfg.backbone
    seed = bc.seed if seed is None else seed
    if bc.iterations <= 0:
        raise ValueError("backbone.iterations must be positive to pre-train")
    rng = np.random.default_rng([seed, 11, ("s1", "s2").index(stream)])
    net = CoarseToFineNet(cfg.model, dataset.input_shape, dataset.n_classes, rng, granularities=1, use_lstm=False)
    items = frame_items(dataset, (stream,), dataset.indices("train"), "signature")
    opt = SGD(net.parameters(), momentum=bc.momentum)
    losses = []
    for _ in range(bc.iterations):
        pick = rng.integers(0, len(items), size=bc.batch_size)
        x, y = labelled_frames(dataset, [items[i] for i in pick])
        mask = np.zeros((len(y), dataset.n_classes))
        mask[np.arange(len(y)), y] = 1.0
        loss = T.softmax_cross_entropy(net.final_logits(net(Tensor(x))), mask) / len(y)
        opt.zero_grad()
        loss.backward()
        opt.step(bc.lr)
        losses.append(loss.item())
    held = frame_items(dataset, (stream,), dataset.indices("test"), "signature")
    hits = 0
    for s in range(0, len(held), 256):
        x, y = labelled_frames(dataset, held[s:s + 256])
        hits += int((net.predict(Tensor(x)).argmax(axis=1) == y).sum())
    info = {
        "stream": stream,
        "first_loss": losses[0],
        "last_loss": float(np.mean(losses[-20:])),
        "heldout_accuracy": hits / max(len(held), 1),
    }
    return stage_state(net), info


def pretrain_backbones(dataset, cfg: Config) -> tuple[dict[str, dict[str, np.ndarray]], dict[str, dict]]:
    """One backbone per stream; ``({stream: stage_state}, {stream: info})``."""
    states, infos = {}, {}
    for s in ("s1", "s2"):
        states[s], infos[s] = pretrain_backbone(dataset, cfg, s)
    return states, infos
