"""Class-group forming from a small, frozen pre-trained classifier.

The grouper ranks classes for an input; the top-5, top-3 and top-1 classes
become the coarse, middle and fine groups. The ground-truth class is always
forced into every group: by default it replaces the lowest-ranked member so
group sizes stay fixed; ``inclusion="append"`` grows the group by one
instead. Equal probabilities rank the lower class index first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import GrouperConfig
from .layers import Conv2d, Linear, Module
from .optim import SGD
from .tensor import Tensor


class FrozenError(RuntimeError):
    pass


class GrouperModel(Module):
    """Two conv blocks and one FC head mapping an input to class logits."""

    def __init__(self, input_shape: tuple[int, int, int], n_classes: int, channels: Sequence[int],
                 rng: np.random.Generator):
        super().__init__()
        c, h, w = input_shape
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.conv1 = Conv2d(c, channels[0], 3, rng, padding=1)
        self.conv2 = Conv2d(channels[0], channels[1], 3, rng, padding=1)
        self.head = Linear(channels[1] * (h // 4) * (w // 4), n_classes, rng)
        object.__setattr__(self, "frozen", False)

    def logits(self, x: Tensor) -> Tensor:
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        h = T.max_pool2d(T.relu(self.conv1(x)))
        h = T.max_pool2d(T.relu(self.conv2(h)))
        out = self.head(T.reshape(h, (h.shape[0], -1)))
        return T.reshape(out, (self.n_classes,)) if single else out

    def probabilities(self, x) -> np.ndarray:
        x = x if isinstance(x, Tensor) else Tensor(x)
        with T.no_grad():
            return T.softmax_np(self.logits(x).data)

    def freeze(self) -> "GrouperModel":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        object.__setattr__(self, "frozen", True)
        return self


@dataclass(frozen=True)
class ClassGroupSet:
    """Class groups for one input, coarsest first."""

    groups: tuple[tuple[int, ...], ...]

    def __iter__(self):
        return iter(self.groups)

    def __len__(self):
        return len(self.groups)

    def __getitem__(self, k):
        return self.groups[k]

    def as_sets(self) -> list[set[int]]:
        return [set(g) for g in self.groups]


def rank_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices by descending probability; ties keep the lower index first."""
    return np.argsort(-np.asarray(probs), axis=-1, kind="stable")


def groups_from_ranking(ranking: Sequence[int], gt: int, sizes: Sequence[int] = (5, 3, 1),
                        inclusion: str = "replace") -> ClassGroupSet:
    n = len(ranking)
    if not 0 <= gt < n:
        raise ValueError(f"ground-truth label {gt} out of range for {n} classes")
    out = []
    for size in sizes:
        k = min(size, n)
        members = [int(c) for c in ranking[:k]]
        if gt not in members:
            if inclusion == "replace":
                members[-1] = gt
            elif inclusion == "append":
                members.append(gt)
            else:
                raise ValueError(f"unknown inclusion rule {inclusion!r}")
        out.append(tuple(members))
    return ClassGroupSet(tuple(out))


def form_groups(grouper: GrouperModel, x, gt: int, sizes: Sequence[int] = (5, 3, 1),
                inclusion: str = "replace") -> ClassGroupSet:
    if not grouper.frozen:
        raise FrozenError("class groups need a frozen grouper")
    probs = grouper.probabilities(x)
    return groups_from_ranking(rank_classes(probs), gt, sizes, inclusion)


def group_masks(rankings: np.ndarray, gt: np.ndarray, sizes: Sequence[int], inclusion: str = "replace") -> list[np.ndarray]:
    """Batched groups as (B, N) 0/1 masks, one per granularity."""
    rankings = np.asarray(rankings)
    b, n = rankings.shape
    masks = [np.zeros((b, n)) for _ in sizes]
    for i in range(b):
        gs = groups_from_ranking(rankings[i], int(gt[i]), sizes, inclusion)
        for k, g in enumerate(gs):
            masks[k][i, list(g)] = 1.0
    return masks


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    return len(a & b) / len(a | b) if a | b else 1.0


# pre-training ------------------------------------------------------------------

def frame_items(dataset, streams: Sequence[str], videos: np.ndarray, frames: str):
    items = []
    for v in videos:
        for s in streams:
            times = dataset.signature_frames(s, int(v)) if frames == "signature" else np.arange(dataset.n_frames)
            items.extend((s, int(v), int(t)) for t in times)
    return items


def labelled_frames(dataset, items):
    by_stream: dict[str, list[int]] = {}
    for i, (s, _, _) in enumerate(items):
        by_stream.setdefault(s, []).append(i)
    x = np.empty((len(items),) + dataset.input_shape)
    for s, idx in by_stream.items():
        x[idx] = dataset.frames(s, [items[i][1] for i in idx], [items[i][2] for i in idx])
    y = np.array([dataset.labels[v] for _, v, _ in items])
    return x, y


def accuracy(grouper: GrouperModel, dataset, items, chunk: int = 256) -> float:
    if not items:
        return float("nan")
    hits = 0
    for start in range(0, len(items), chunk):
        x, y = labelled_frames(dataset, items[start:start + chunk])
        hits += int((grouper.probabilities(x).argmax(axis=1) == y).sum())
    return hits / len(items)


def pretrain_grouper(dataset, cfg: GrouperConfig, streams: Sequence[str] = ("s1",), seed: int | None = None,
                     frames: str = "signature"):
    """Train a grouper on a random ``cfg.fraction`` of the training videos, then freeze it.

    Returns ``(grouper, info)``; ``info`` holds the sampled videos and the
    accuracy on the training fraction and on held-out test videos.
    """
    seed = cfg.seed if seed is None else seed
    if cfg.iterations <= 0:
        raise ValueError("iterations must be positive")
    rng = np.random.default_rng([seed, 7])
    train_ids = dataset.indices("train")
    n_take = int(round(cfg.fraction * len(train_ids)))
    if n_take < 1:
        raise ValueError(f"fraction {cfg.fraction} of {len(train_ids)} training videos selects nothing")
    videos = np.sort(rng.choice(train_ids, size=n_take, replace=False))
    items = frame_items(dataset, streams, videos, frames)
    model = GrouperModel(dataset.input_shape, dataset.n_classes, cfg.channels, rng)
    opt = SGD(model.parameters(), momentum=cfg.momentum)
    for _ in range(cfg.iterations):
        pick = rng.integers(0, len(items), size=cfg.batch_size)
        x, y = labelled_frames(dataset, [items[i] for i in pick])
        mask = np.zeros((len(y), dataset.n_classes))
        mask[np.arange(len(y)), y] = 1.0
        loss = T.softmax_cross_entropy(model.logits(Tensor(x)), mask) / len(y)
        opt.zero_grad()
        loss.backward()
        opt.step(cfg.lr)
    model.freeze()
    held = frame_items(dataset, streams, dataset.indices("test"), frames)
    info = {
        "streams": list(streams),
        "videos": videos.tolist(),
        "train_accuracy": accuracy(model, dataset, items),
        "heldout_accuracy": accuracy(model, dataset, held),
        "chance": 1.0 / dataset.n_classes,
    }
    return model, info


class GroupCache:
    """Memoised grouper rankings per (video, time) for one stream."""

    def __init__(self, grouper: GrouperModel, dataset, stream: str):
        if not grouper.frozen:
            raise FrozenError("class groups need a frozen grouper")
        self.grouper = grouper
        self.dataset = dataset
        self.stream = stream
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def rankings(self, videos, times) -> np.ndarray:
        times = np.clip(np.asarray(times), 0, self.dataset.n_frames - 1)
        keys = [(int(v), int(t)) for v, t in zip(videos, times)]
        todo = sorted({k for k in keys if k not in self._cache})
        if todo:
            x = self.dataset.frames(self.stream, [k[0] for k in todo], [k[1] for k in todo])
            ranks = rank_classes(self.grouper.probabilities(x))
            for k, r in zip(todo, ranks):
                self._cache[k] = r
        return np.stack([self._cache[k] for k in keys])
