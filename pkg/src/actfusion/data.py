"""Synthetic two-stream videos with controllable asynchrony.

Each class owns one fixed random patch per stream. A video of class ``c``
shows the stream-1 patch of ``c`` during ``[onset, onset + width)`` and the
stream-2 patch during the same window shifted by ``lag`` frames. Every
other frame is Gaussian noise.

Two optional mechanisms make single-view classification ambiguous:

* confusable pairs: pair ``(a, b)`` shares one stream's patch (stream 1 for
  even pairs, stream 2 for odd pairs), so that stream cannot tell them apart;
* distractor events: with probability ``distractor_prob`` each, the patches
  of another class ``d`` appear in both streams too, but separated by a lag
  different from ``lag``. Only the cross-stream timing tells the true
  event from the distractor.

On disk a dataset is a directory holding ``manifest.json`` plus one ``.npy``
file per video and stream (``videos/v00012_s1.npy``), each a little-endian
float32 array of shape (frames, C, H, W). The ``.npy`` header carries magic,
dtype and shape.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig

MANIFEST_VERSION = 1
STREAMS = ("s1", "s2")


@dataclass
class SyntheticVideo:
    label: int
    split: str
    onsets: dict[str, int]
    distractors: list[dict] = field(default_factory=list)
    s1: np.ndarray | None = None
    s2: np.ndarray | None = None


class InfeasiblePlacement(ValueError):
    pass


def _intervals(start: int, lag: int, width: int) -> tuple[tuple[int, int], tuple[int, int]]:
    return (start, start + width), (start + lag, start + lag + width)


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def _place_events(rng: np.random.Generator, cfg: DataConfig, lags: list[int]) -> list[int]:
    """Draw onsets for events with the given stream-2 lags; windows never overlap within a stream."""
    lo, hi = cfg.margin, cfg.frames - cfg.margin
    w = cfg.signature_width
    ranges = []
    for lag in lags:
        first = lo - min(0, lag)
        last = hi - w - max(0, lag)
        if last < first:
            raise InfeasiblePlacement(
                f"no room for an event with lag {lag} (width {w}) inside frames [{lo}, {hi})"
            )
        ranges.append((first, last))
    for _ in range(2000):
        onsets = [int(rng.integers(a, b + 1)) for a, b in ranges]
        wins = [_intervals(t, lag, w) for t, lag in zip(onsets, lags)]
        ok = all(
            not _overlaps(wins[i][s], wins[j][s])
            for s in (0, 1)
            for i in range(len(wins))
            for j in range(i + 1, len(wins))
        )
        if ok:
            return onsets
    raise InfeasiblePlacement(f"could not place {len(lags)} non-overlapping events in {cfg.frames} frames")


class Dataset:
    """In-memory dataset. Frames are stored as float32 and served as float64."""

    def __init__(self, config: DataConfig, labels, splits, onsets, distractors, frames, signatures, locations):
        self.config = config
        self.labels = np.asarray(labels, dtype=np.int64)
        self.splits = list(splits)
        self.onsets = np.asarray(onsets, dtype=np.int64)  # (V, 2)
        self.distractors = distractors
        self.frames_by_stream = frames  # {"s1": (V, T, C, H, W) float32, ...}
        self.signatures = signatures  # (2, N, C, P, P)
        self.locations = locations  # (2, N, 2)

    @property
    def n_videos(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def n_frames(self) -> int:
        return self.config.frames

    @property
    def input_shape(self) -> tuple[int, int, int]:
        c = self.config
        return (c.channels, c.height, c.width)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def frames(self, stream: str, videos, times) -> np.ndarray:
        """Frames for paired ``videos``/``times`` arrays; times are clamped to the video."""
        videos = np.asarray(videos, dtype=np.int64)
        times = np.clip(np.asarray(times, dtype=np.int64), 0, self.n_frames - 1)
        return self.frames_by_stream[stream][videos, times].astype(np.float64)

    def video(self, i: int) -> SyntheticVideo:
        return SyntheticVideo(
            label=int(self.labels[i]),
            split=self.splits[i],
            onsets={"s1": int(self.onsets[i, 0]), "s2": int(self.onsets[i, 1])},
            distractors=list(self.distractors[i]),
            s1=self.frames_by_stream["s1"][i].astype(np.float64),
            s2=self.frames_by_stream["s2"][i].astype(np.float64),
        )

    def signature_frames(self, stream: str, video: int) -> np.ndarray:
        """Frame indices where the video's own class patch is visible in ``stream``."""
        col = STREAMS.index(stream)
        start = int(self.onsets[video, col])
        return np.arange(start, start + self.config.signature_width)

    # persistence -----------------------------------------------------------
    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "videos").mkdir(parents=True, exist_ok=True)
        videos = []
        for i in range(self.n_videos):
            files = {}
            for s in STREAMS:
                rel = f"videos/v{i:05d}_{s}.npy"
                np.save(out / rel, np.ascontiguousarray(self.frames_by_stream[s][i], dtype="<f4"))
                files[s] = rel
            videos.append({
                "id": i,
                "label": int(self.labels[i]),
                "split": self.splits[i],
                "onsets": {"s1": int(self.onsets[i, 0]), "s2": int(self.onsets[i, 1])},
                "distractors": self.distractors[i],
                "files": files,
            })
        np.save(out / "signatures.npy", np.ascontiguousarray(self.signatures, dtype="<f8"))
        manifest = {
            "schema_version": MANIFEST_VERSION,
            "config": asdict(self.config),
            "locations": self.locations.tolist(),
            "videos": videos,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        mpath = path / "manifest.json"
        if not mpath.is_file():
            raise FileNotFoundError(f"dataset manifest not found: {mpath}")
        manifest = json.loads(mpath.read_text())
        if manifest.get("schema_version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest schema {manifest.get('schema_version')}")
        cfg = DataConfig(**manifest["config"])
        vids = manifest["videos"]
        frames = {}
        for s in STREAMS:
            first = np.load(path / vids[0]["files"][s])
            arr = np.empty((len(vids),) + first.shape, dtype=np.float32)
            for v in vids:
                arr[v["id"]] = np.load(path / v["files"][s])
            frames[s] = arr
        return cls(
            cfg,
            labels=[v["label"] for v in vids],
            splits=[v["split"] for v in vids],
            onsets=[[v["onsets"]["s1"], v["onsets"]["s2"]] for v in vids],
            distractors=[v["distractors"] for v in vids],
            frames=frames,
            signatures=np.load(path / "signatures.npy"),
            locations=np.asarray(manifest["locations"], dtype=np.int64),
        )


def make_signatures(cfg: DataConfig, rng: np.random.Generator):
    n, c, p = cfg.n_classes, cfg.channels, cfg.patch_size
    if p > min(cfg.height, cfg.width):
        raise ValueError(f"patch_size {p} exceeds frame size {cfg.height}x{cfg.width}")
    sigs = cfg.amplitude * rng.choice([-1.0, 1.0], size=(2, n, c, p, p))
    locs = np.stack([
        rng.integers(0, cfg.height - p + 1, size=(2, n)),
        rng.integers(0, cfg.width - p + 1, size=(2, n)),
    ], axis=-1)
    if 2 * cfg.confusable_pairs > n:
        raise ValueError(f"{cfg.confusable_pairs} confusable pairs need at least {2 * cfg.confusable_pairs} classes")
    order = rng.permutation(n)
    pairs = []
    for k in range(cfg.confusable_pairs):
        a, b = int(order[2 * k]), int(order[2 * k + 1])
        shared = k % 2
        sigs[shared, b] = sigs[shared, a]
        locs[shared, b] = locs[shared, a]
        pairs.append((a, b, shared))
    return sigs, locs, pairs


def generate(cfg: DataConfig) -> Dataset:
    """Build the full dataset deterministically from ``cfg.seed``."""
    if cfg.n_classes < 2:
        raise ValueError("need at least two classes")
    if cfg.lag >= cfg.frames - cfg.signature_width:
        raise InfeasiblePlacement("lag must be smaller than frames - signature_width")
    if cfg.distractors and cfg.n_classes < 2:
        raise ValueError("distractors need a second class")
    rng = np.random.default_rng(cfg.seed)
    sigs, locs, _ = make_signatures(cfg, rng)
    n_vid = cfg.n_classes * cfg.videos_per_class
    labels = np.repeat(np.arange(cfg.n_classes), cfg.videos_per_class)

    splits = ["train"] * n_vid
    for c in range(cfg.n_classes):
        members = np.flatnonzero(labels == c)
        n_test = int(round(cfg.test_fraction * len(members)))
        for i in rng.permutation(members)[:n_test]:
            splits[int(i)] = "test"

    shape = (cfg.frames, cfg.channels, cfg.height, cfg.width)
    frames = {s: np.empty((n_vid,) + shape, dtype=np.float32) for s in STREAMS}
    onsets = np.zeros((n_vid, 2), dtype=np.int64)
    distractors: list[list[dict]] = []
    w, p = cfg.signature_width, cfg.patch_size
    for v in range(n_vid):
        vr = np.random.default_rng([cfg.seed, 1, v])
        label = int(labels[v])
        n_dis = int(np.sum(vr.random(cfg.distractors) < cfg.distractor_prob))
        dlags = [int(vr.choice(cfg.distractor_lags)) for _ in range(n_dis)]
        dcls = []
        for _ in range(n_dis):
            d = int(vr.integers(0, cfg.n_classes - 1))
            dcls.append(d + (d >= label))
        starts = _place_events(vr, cfg, [cfg.lag] + dlags)
        onsets[v] = (starts[0], starts[0] + cfg.lag)
        events = [(label, starts[0], cfg.lag)] + list(zip(dcls, starts[1:], dlags))
        distractors.append([{"class": d, "onset_s1": t, "onset_s2": t + lag} for d, t, lag in events[1:]])
        for si, s in enumerate(STREAMS):
            arr = cfg.noise * vr.standard_normal(shape)
            for cls_, t0, lag in events:
                start = t0 + (lag if si == 1 else 0)
                y, x = locs[si, cls_]
                arr[start:start + w, :, y:y + p, x:x + p] += sigs[si, cls_]
            frames[s][v] = arr
    return Dataset(cfg, labels, splits, onsets, distractors, frames, sigs, locs)
