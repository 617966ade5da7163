"""Twelve-period video evaluation and reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import fingerprint
from .config import Config
from .fusion import PERIOD_LENGTH, build_period_prediction, evaluation_anchors, period_times
from .tensor import Tensor
from .train import DirectionModel, FrameModel, get_mode

REPORT_SCHEMA_VERSION = 1
_FEATURE_CHUNK = 256


@dataclass
class EvalReport:
    mode: str
    split: str
    accuracy: float
    n_videos: int
    confusion: list[list[int]]  # rows: true class, columns: predicted class
    class_counts: list[int]
    video_ids: list[int]
    predictions: list[int]
    traces: dict[str, list[list[float]]]  # video id -> per-period summed scores
    periods: int
    anchors: list[int]
    seeds: dict[str, int]
    config: dict
    config_fingerprint: str
    schema_version: int = REPORT_SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        raw = json.loads(Path(path).read_text())
        if raw.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported report schema {raw.get('schema_version')}")
        return cls(**raw)


def _features(net, frames: np.ndarray) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(frames), _FEATURE_CHUNK):
            out.append(net(Tensor(frames[s:s + _FEATURE_CHUNK]), heads=False)["feature"].data)
    return np.concatenate(out) if out else np.zeros((0, net.feature_dim))


def _probs(net, frames: np.ndarray) -> np.ndarray:
    return np.concatenate([net.predict(Tensor(frames[s:s + _FEATURE_CHUNK]))
                           for s in range(0, len(frames), _FEATURE_CHUNK)])


def direction_period_scores(model: DirectionModel, dataset, videos, anchors: np.ndarray, delta: int,
                            align: str = "center") -> np.ndarray:
    """(V, P, N) period predictions of one anchor-direction model."""
    videos = np.asarray(videos, dtype=np.int64)
    v, p = len(videos), len(anchors)
    seq_t = np.stack([period_times(int(a), delta, align)[0] for a in anchors])  # (P, 5)
    seq_t = np.clip(seq_t, 0, dataset.n_frames - 1)
    keys = np.stack([np.repeat(videos, p * PERIOD_LENGTH), np.tile(seq_t.reshape(-1), v)], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    seq_feat = _features(model.seq_net, dataset.frames(model.seq_stream, uniq[:, 0], uniq[:, 1]))
    anc_feat = _features(model.anchor_net,
                         dataset.frames(model.anchor_stream, np.repeat(videos, p), np.tile(anchors, v)))
    inverse = inverse.reshape(v * p, PERIOD_LENGTH)
    with T.no_grad():
        others = [Tensor(seq_feat[inverse[:, t]]) for t in range(PERIOD_LENGTH)]
        _, pred = model.fusion(Tensor(anc_feat), others)
    return pred.reshape(v, p, -1)


def period_scores(models: dict, dataset, cfg: Config, mode: str, videos) -> tuple[np.ndarray, np.ndarray]:
    """Per-period score vectors, shape (V, P, M, N), for M models or streams, plus the anchor times.

    Frame-level modes contribute the two streams' softmax outputs at each
    anchor time; fused modes contribute each anchor-direction model's
    period prediction.
    """
    spec = get_mode(mode)
    anchors = evaluation_anchors(dataset.n_frames, cfg.fusion.delta, cfg.eval.periods, cfg.fusion.anchor)
    videos = np.asarray(videos, dtype=np.int64)
    parts = []
    if not spec.fused:
        model: FrameModel = models["frame"]
        vt = np.repeat(videos, len(anchors)), np.tile(anchors, len(videos))
        for s in ("s1", "s2"):
            parts.append(_probs(model.net(s), dataset.frames(s, *vt)).reshape(len(videos), len(anchors), -1))
    else:
        for name in sorted(models):
            parts.append(direction_period_scores(models[name], dataset, videos, anchors, spec.delta,
                                                 cfg.fusion.anchor))
    return np.stack(parts, axis=2), anchors


def combine(scores: np.ndarray) -> np.ndarray:
    """Sum the period score vectors over periods and models: (V, P, M, N) -> (V, N)."""
    if scores.shape[2] == 2:
        per_period = build_period_prediction(scores[:, :, 0], scores[:, :, 1])
    else:
        per_period = scores.sum(axis=2)
    return per_period.sum(axis=1)


def evaluate(models: dict, dataset, cfg: Config, mode: str, split: str = "test", seeds: dict | None = None,
             trace_videos: int = 8, chunk: int = 16) -> EvalReport:
    videos = dataset.indices(split)
    if len(videos) == 0:
        raise ValueError(f"split {split!r} has no videos")
    totals, traces = [], {}
    anchors = None
    for s in range(0, len(videos), chunk):
        vids = videos[s:s + chunk]
        scores, anchors = period_scores(models, dataset, cfg, mode, vids)
        totals.append(combine(scores))
        for i, v in enumerate(vids):
            if len(traces) < trace_videos:
                traces[str(int(v))] = scores[i].sum(axis=1).round(12).tolist()
    total = np.concatenate(totals)
    pred = total.argmax(axis=1)
    labels = dataset.labels[videos]
    n = dataset.n_classes
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    cfg_dict = cfg.to_dict()
    return EvalReport(
        mode=mode,
        split=split,
        accuracy=float((pred == labels).mean()),
        n_videos=int(len(videos)),
        confusion=confusion.tolist(),
        class_counts=np.bincount(labels, minlength=n).tolist(),
        video_ids=videos.tolist(),
        predictions=pred.tolist(),
        traces=traces,
        periods=int(cfg.eval.periods),
        anchors=[int(a) for a in anchors],
        seeds=dict(seeds or {"data": cfg.data.seed, "grouper": cfg.grouper.seed, "train": cfg.train.seed}),
        config=cfg_dict,
        config_fingerprint=fingerprint(cfg_dict),
    )


def single_model_accuracy(model, dataset, cfg: Config, mode: str, split: str = "test") -> float:
    """Held-out accuracy of one model alone (used for periodic checks during training)."""
    name = "frame" if isinstance(model, FrameModel) else model.direction
    return evaluate({name: model}, dataset, cfg, mode, split, trace_videos=0).accuracy
