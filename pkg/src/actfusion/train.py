"""Training of frame-level and fused two-stream models.

A *mode* fixes the feature extractor (coarse-to-fine or baseline), how the
class groups are formed, and whether an asynchronous fusion network sits on
top (and with which frame spacing). Frame-level modes train one network per
stream on single frames; fused modes train two independent models, one
anchored on each stream, with the joint objective

    sum_{t=1..5} L_C(other-stream input t) + L_C(anchor input) + L_A.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import load_stages, pretrain_backbones
from .c2f import CoarseToFineNet, c2f_lstm_loss, granularity_loss, gt_groups
from .config import Config
from .fusion import PERIOD_LENGTH, AsyncFusionNet, anchor_range, async_loss, period_times
from .grouper import GroupCache, GrouperModel, group_masks
from .layers import Module
from .optim import SGD, step_lr
from .tensor import Tensor

DIRECTIONS = ("anchor_s2", "anchor_s1")
_DIRECTION_STREAMS = {"anchor_s2": ("s1", "s2"), "anchor_s1": ("s2", "s1")}  # (sequence, anchor)


class TrainingDiverged(RuntimeError):
    pass


class UnknownMode(KeyError):
    pass


@dataclass(frozen=True)
class ModeSpec:
    name: str
    extractor: str  # "c2f" or "baseline"
    grouping: str  # "grouper", "gt" (singleton groups) or "none" (granularity loss dropped)
    granularities: int
    delta: int | None  # None: frame-level two-stream model

    @property
    def fused(self) -> bool:
        return self.delta is not None

    @property
    def needs_grouper(self) -> bool:
        return self.grouping == "grouper"


MODES = {
    m.name: m
    for m in [
        ModeSpec("baseline", "baseline", "gt", 1, None),
        ModeSpec("co2fi_no_grouping", "c2f", "none", 3, None),
        ModeSpec("co2fi_two_granularities", "c2f", "grouper", 2, None),
        ModeSpec("co2fi_no_coarseness", "c2f", "gt", 3, None),
        ModeSpec("co2fi_complete", "c2f", "grouper", 3, None),
        ModeSpec("baseline_syn", "baseline", "gt", 1, 0),
        ModeSpec("baseline_asyn1", "baseline", "gt", 1, 1),
        ModeSpec("baseline_asyn5", "baseline", "gt", 1, 5),
        ModeSpec("co2fi_syn", "c2f", "grouper", 3, 0),
        ModeSpec("co2fi_asyn1", "c2f", "grouper", 3, 1),
        ModeSpec("co2fi_asyn5", "c2f", "grouper", 3, 5),
    ]
}


def get_mode(name: str) -> ModeSpec:
    try:
        return MODES[name]
    except KeyError:
        raise UnknownMode(f"unknown mode {name!r}; known modes: {', '.join(MODES)}") from None


def granularity_settings(cfg: Config, k: int) -> tuple[list[int], list[float]]:
    """Group sizes and alphas for the ``k`` finest granularities."""
    return list(cfg.model.group_sizes[3 - k:]), list(cfg.model.alphas[3 - k:])


# models --------------------------------------------------------------------------

def build_stream_net(cfg: Config, spec: ModeSpec, input_shape, n_classes: int, rng) -> CoarseToFineNet:
    return CoarseToFineNet(cfg.model, input_shape, n_classes, rng, granularities=spec.granularities,
                           use_lstm=spec.extractor == "c2f")


class FrameModel(Module):
    """One network per stream; a frame's two-stream score is the sum of both softmax outputs."""

    def __init__(self, cfg: Config, spec: ModeSpec, input_shape, n_classes: int, rng):
        super().__init__()
        self.spec = spec
        self.net_s1 = build_stream_net(cfg, spec, input_shape, n_classes, rng)
        self.net_s2 = build_stream_net(cfg, spec, input_shape, n_classes, rng)

    def net(self, stream: str) -> CoarseToFineNet:
        return self.net_s1 if stream == "s1" else self.net_s2


class DirectionModel(Module):
    """Coarse-to-fine (or baseline) nets for both streams plus the fusion network for one anchor direction."""

    def __init__(self, cfg: Config, spec: ModeSpec, direction: str, input_shape, n_classes: int, rng):
        super().__init__()
        if direction not in _DIRECTION_STREAMS:
            raise ValueError(f"unknown direction {direction!r}")
        self.spec = spec
        self.direction = direction
        self.seq_stream, self.anchor_stream = _DIRECTION_STREAMS[direction]
        self.seq_net = build_stream_net(cfg, spec, input_shape, n_classes, rng)
        self.anchor_net = build_stream_net(cfg, spec, input_shape, n_classes, rng)
        f = cfg.fusion
        self.fusion = AsyncFusionNet(self.seq_net.feature_dim, f.hidden, n_classes, rng,
                                     fuser_channels=f.fuser_channels, share_fusers=f.share_fusers, predict=f.predict)

    def net(self, stream: str) -> CoarseToFineNet:
        return self.seq_net if stream == self.seq_stream else self.anchor_net


# samples ---------------------------------------------------------------------------

@dataclass
class PeriodSample:
    """Five other-stream inputs, one anchor input and the label."""

    sequence: np.ndarray  # (5, C, H, W)
    anchor: np.ndarray  # (C, H, W)
    label: int
    delta: int = 5


@dataclass
class PeriodBatch:
    seq_frames: np.ndarray  # (U, C, H, W) unique other-stream frames
    seq_index: np.ndarray  # (B, 5) rows into seq_frames
    anchor_frames: np.ndarray  # (B, C, H, W)
    labels: np.ndarray  # (B,)
    seq_masks: list[np.ndarray] | None = None  # per granularity, (U, N)
    anchor_masks: list[np.ndarray] | None = None  # per granularity, (B, N)
    videos: np.ndarray | None = None
    anchors: np.ndarray | None = None

    @classmethod
    def from_samples(cls, samples: list[PeriodSample]) -> "PeriodBatch":
        seq = np.concatenate([s.sequence for s in samples])
        idx = np.arange(len(seq)).reshape(len(samples), PERIOD_LENGTH)
        return cls(seq, idx, np.stack([s.anchor for s in samples]), np.array([s.label for s in samples]))


@dataclass
class FrameBatch:
    frames: dict[str, np.ndarray]
    labels: np.ndarray
    masks: dict[str, list[np.ndarray] | None] = field(default_factory=dict)


# losses ----------------------------------------------------------------------------

def stream_loss(net: CoarseToFineNet, out: dict, labels, masks, cfg: Config, spec: ModeSpec,
                rows: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Coarse-to-fine loss (granularity term + LSTM term), batch-averaged.

    ``rows`` selects (with repetition) which rows of ``out`` are the inputs, so
    one forward pass over unique frames can stand for repeated inputs.
    """
    n = net.n_classes
    _, alphas = granularity_settings(cfg, net.granularities)
    pick = (lambda t: t) if rows is None else (lambda t: t[rows])
    comps = {}
    total = Tensor(0.0)
    if spec.grouping != "none":
        glogits = [pick(l) for l in out["granularity_logits"]]
        gm = [m if rows is None else m[rows] for m in masks]
        l_v = granularity_loss(glogits, gm, alphas, n)
        comps["L_v"] = l_v.item()
        total = total + l_v
    if net.use_lstm:
        l_l = c2f_lstm_loss([pick(l) for l in out["unit_logits"]], labels, cfg.model.beta, n)
        comps["L_l"] = l_l.item()
        total = total + l_l
    return total, comps


def _masks_for(spec: ModeSpec, cfg: Config, labels, n_classes: int, rankings=None):
    if spec.grouping == "none":
        return None
    sizes, _ = granularity_settings(cfg, spec.granularities)
    if spec.grouping == "gt":
        return gt_groups(labels, n_classes, spec.granularities)
    if rankings is None:
        raise ValueError("grouper rankings are required for this mode")
    return group_masks(rankings, labels, sizes, cfg.grouper.inclusion)


def joint_loss(model: DirectionModel, batch: PeriodBatch, cfg: Config, stop_grad: bool = False) -> tuple[Tensor, dict]:
    """Joint objective for a batch of periods (batch-averaged per term)."""
    spec = model.spec
    if spec.grouping == "grouper" and (batch.seq_masks is None or batch.anchor_masks is None):
        raise ValueError("class groups missing for the period batch")
    n = model.fusion.n_classes
    seq_out = model.seq_net(Tensor(batch.seq_frames))
    anc_out = model.anchor_net(Tensor(batch.anchor_frames))

    seq_labels = np.repeat(batch.labels, PERIOD_LENGTH)
    rows = batch.seq_index.reshape(-1)
    u = len(batch.seq_frames)
    seq_label_u = np.zeros(u, dtype=np.int64)
    seq_label_u[rows] = seq_labels
    seq_masks = batch.seq_masks if spec.grouping == "grouper" else _masks_for(spec, cfg, seq_label_u, n)
    anc_masks = batch.anchor_masks if spec.grouping == "grouper" else _masks_for(spec, cfg, batch.labels, n)

    l_seq, c_seq = stream_loss(model.seq_net, seq_out, seq_labels, seq_masks, cfg, spec, rows=rows)
    # five inputs per period: batch mean over B*5 rows, times 5 = sum over t of batch means
    l_seq = l_seq * float(PERIOD_LENGTH)
    l_anc, c_anc = stream_loss(model.anchor_net, anc_out, batch.labels, anc_masks, cfg, spec)

    feat_seq = seq_out["feature"]
    feat_anc = anc_out["feature"]
    if stop_grad:
        feat_seq, feat_anc = feat_seq.detach(), feat_anc.detach()
    others = [feat_seq[batch.seq_index[:, t]] for t in range(PERIOD_LENGTH)]
    unit_logits, _ = model.fusion(feat_anc, others)
    l_a = async_loss(unit_logits, batch.labels, cfg.fusion.gamma, n)
    total = l_seq + l_anc + l_a
    comps = {"L_C_seq": l_seq.item(), "L_C_anchor": l_anc.item(), "L_A": l_a.item()}
    comps.update({f"seq_{k}": v * PERIOD_LENGTH for k, v in c_seq.items()})
    comps.update({f"anchor_{k}": v for k, v in c_anc.items()})
    return total, comps


def frame_loss(model: FrameModel, batch: FrameBatch, cfg: Config) -> tuple[Tensor, dict]:
    total = Tensor(0.0)
    comps = {}
    for s in ("s1", "s2"):
        net = model.net(s)
        masks = batch.masks.get(s)
        if masks is None:
            masks = _masks_for(model.spec, cfg, batch.labels, net.n_classes)
        out = net(Tensor(batch.frames[s]), heads=model.spec.grouping != "none")
        l, c = stream_loss(net, out, batch.labels, masks, cfg, model.spec)
        total = total + l
        comps[f"L_C_{s}"] = l.item()
    return total, comps


# sampling -----------------------------------------------------------------------------

class Sampler:
    """Draws training batches: one random period (or frame time) per sampled video."""

    def __init__(self, dataset, cfg: Config, spec: ModeSpec, rng: np.random.Generator, caches=None):
        self.dataset = dataset
        self.cfg = cfg
        self.spec = spec
        self.rng = rng
        self.caches = caches or {}
        self.train_ids = dataset.indices("train")
        if cfg.train.batch_size > len(self.train_ids):
            raise ValueError(f"batch size {cfg.train.batch_size} exceeds {len(self.train_ids)} training videos")
        self.lo, self.hi = anchor_range(dataset.n_frames, cfg.fusion.delta, cfg.fusion.anchor)

    def _draw(self):
        vids = self.rng.choice(self.train_ids, size=self.cfg.train.batch_size, replace=False)
        anchors = self.rng.integers(self.lo, self.hi + 1, size=len(vids))
        return vids, anchors

    def _rankings(self, stream, videos, times):
        if not self.spec.needs_grouper:
            return None
        return self.caches[stream].rankings(videos, times)

    def period_batch(self, model: DirectionModel) -> PeriodBatch:
        vids, anchors = self._draw()
        ds = self.dataset
        labels = ds.labels[vids]
        seq_t = np.stack([period_times(a, self.spec.delta, self.cfg.fusion.anchor)[0] for a in anchors])
        seq_t = np.clip(seq_t, 0, ds.n_frames - 1)
        keys = np.stack([np.repeat(vids, PERIOD_LENGTH), seq_t.reshape(-1)], axis=1)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        seq_frames = ds.frames(model.seq_stream, uniq[:, 0], uniq[:, 1])
        anchor_frames = ds.frames(model.anchor_stream, vids, anchors)
        batch = PeriodBatch(seq_frames, inverse.reshape(len(vids), PERIOD_LENGTH), anchor_frames, labels,
                            videos=vids, anchors=anchors)
        if self.spec.needs_grouper:
            sizes, _ = granularity_settings(self.cfg, self.spec.granularities)
            inc = self.cfg.grouper.inclusion
            batch.seq_masks = group_masks(self._rankings(model.seq_stream, uniq[:, 0], uniq[:, 1]),
                                          ds.labels[uniq[:, 0]], sizes, inc)
            batch.anchor_masks = group_masks(self._rankings(model.anchor_stream, vids, anchors), labels, sizes, inc)
        return batch

    def frame_batch(self) -> FrameBatch:
        vids, times = self._draw()
        ds = self.dataset
        labels = ds.labels[vids]
        frames = {s: ds.frames(s, vids, times) for s in ("s1", "s2")}
        masks = {}
        if self.spec.needs_grouper:
            sizes, _ = granularity_settings(self.cfg, self.spec.granularities)
            for s in ("s1", "s2"):
                masks[s] = group_masks(self._rankings(s, vids, times), labels, sizes, self.cfg.grouper.inclusion)
        return FrameBatch(frames, labels, masks)


# training loop ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    mode: str
    seed: int
    models: dict[str, Module]  # "frame" or the two direction names
    logs: dict[str, list[dict]]
    seconds: float = 0.0


def _param_vector_ok(model: Module) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in model.parameters())


def fit(model: Module, next_loss: Callable[[], tuple[Tensor, dict, object]], cfg: Config,
        log_path: Path | None = None, dump_dir: Path | None = None,
        on_eval: Callable[[int], float] | None = None) -> list[dict]:
    """Momentum SGD with the step schedule; returns the per-iteration log records."""
    tc = cfg.train
    opt = SGD(model.parameters(), momentum=tc.momentum)
    records = []
    fh = open(log_path, "w") if log_path else None
    try:
        for it in range(1, tc.iterations + 1):
            lr = step_lr(it, tc.lr, tc.lr_decay, tc.decay_interval)
            loss, comps, batch = next_loss()
            value = loss.item()
            if not np.isfinite(value):
                _dump(dump_dir, batch, it, comps)
                raise TrainingDiverged(f"non-finite loss {value} at iteration {it}; batch dumped to {dump_dir}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            rec = {"iteration": it, "lr": lr, "loss": value, "components": comps}
            if on_eval is not None and tc.eval_every and it % tc.eval_every == 0:
                rec["eval_accuracy"] = on_eval(it)
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh:
            fh.close()
    if not _param_vector_ok(model):
        raise TrainingDiverged("parameters became non-finite")
    return records


def _dump(dump_dir: Path | None, batch, it: int, comps: dict) -> None:
    if dump_dir is None:
        return
    dump_dir.mkdir(parents=True, exist_ok=True)
    arrays = {k: v for k, v in vars(batch).items() if isinstance(v, np.ndarray)}
    np.savez(dump_dir / f"diverged_iter{it}.npz", **arrays)
    (dump_dir / f"diverged_iter{it}.json").write_text(json.dumps({"iteration": it, "components": comps}))


def make_group_caches(groupers: dict[str, GrouperModel] | None, dataset) -> dict[str, GroupCache]:
    if not groupers:
        return {}
    return {s: GroupCache(groupers[s], dataset, s) for s in ("s1", "s2")}


def train_mode(dataset, cfg: Config, mode: str, seed: int | None = None,
               groupers: dict[str, GrouperModel] | None = None, out_dir=None,
               caches: dict[str, GroupCache] | None = None,
               on_eval: Callable[[str, Module, int], float] | None = None,
               backbones: dict[str, dict] | None = None) -> TrainResult:
    """Train every model a mode needs (one frame model, or both anchor directions).

    ``backbones`` maps each stream to pre-trained convolution stages; when it
    is omitted and ``cfg.backbone.iterations > 0`` they are pre-trained here.
    """
    spec = get_mode(mode)
    seed = cfg.train.seed if seed is None else seed
    if spec.needs_grouper:
        if not groupers:
            raise ValueError(f"mode {mode} needs pre-trained groupers")
        for g in groupers.values():
            if not g.frozen:
                raise ValueError("groupers must be frozen before joint training")
        caches = caches or make_group_caches(groupers, dataset)
    if backbones is None and cfg.backbone.iterations > 0:
        backbones, _ = pretrain_backbones(dataset, cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    shape, n = dataset.input_shape, dataset.n_classes
    start = time.perf_counter()
    models, logs = {}, {}
    names = ["frame"] if not spec.fused else list(DIRECTIONS)
    for idx, name in enumerate(names):
        init_rng = np.random.default_rng([seed, idx, 0])
        sampler = Sampler(dataset, cfg, spec, np.random.default_rng([seed, idx, 1]), caches)
        if spec.fused:
            model = DirectionModel(cfg, spec, name, shape, n, init_rng)

            def next_loss(model=model, sampler=sampler):
                batch = sampler.period_batch(model)
                loss, comps = joint_loss(model, batch, cfg, stop_grad=cfg.train.fusion_stop_grad)
                return loss, comps, batch
        else:
            model = FrameModel(cfg, spec, shape, n, init_rng)

            def next_loss(model=model, sampler=sampler):
                batch = sampler.frame_batch()
                loss, comps = frame_loss(model, batch, cfg)
                return loss, comps, batch

        if backbones:
            for s in ("s1", "s2"):
                load_stages(model.net(s), backbones[s])
        hook = None
        if on_eval:
            best = {"acc": -1.0}

            def hook(it, model=model, name=name, best=best):
                acc = on_eval(name, model, it)
                if out and acc > best["acc"]:
                    best["acc"] = acc
                    save_models(out, {name: model}, cfg, mode, {"seed": seed, "iteration": it, "accuracy": acc},
                                tag="best")
                return acc
        logs[name] = fit(model, next_loss, cfg,
                         log_path=out / f"train_log_{name}.jsonl" if out else None,
                         dump_dir=out, on_eval=hook)
        models[name] = model
    return TrainResult(mode, seed, models, logs, time.perf_counter() - start)


# persistence -------------------------------------------------------------------------

def model_kind(mode: str, name: str) -> str:
    return f"{mode}/{name}"


def build_models(cfg: Config, mode: str, input_shape, n_classes: int) -> dict[str, Module]:
    spec = get_mode(mode)
    rng = np.random.default_rng(0)  # weights are overwritten on load
    if not spec.fused:
        return {"frame": FrameModel(cfg, spec, input_shape, n_classes, rng)}
    return {d: DirectionModel(cfg, spec, d, input_shape, n_classes, rng) for d in DIRECTIONS}


def save_models(out_dir, models: dict[str, Module], cfg: Config, mode: str, meta: dict | None = None,
                tag: str = "final") -> list[Path]:
    from . import checkpoint

    out = Path(out_dir)
    paths = []
    for name, model in sorted(models.items()):
        p = out / f"{tag}_{name}.ckpt"
        checkpoint.save(p, model.state_dict(), model_kind(mode, name), cfg.to_dict(), dict(meta or {}, mode=mode))
        paths.append(p)
    return paths


def load_models(in_dir, cfg: Config, mode: str, input_shape, n_classes: int, tag: str = "final") -> dict[str, Module]:
    from . import checkpoint

    models = build_models(cfg, mode, input_shape, n_classes)
    for name, model in models.items():
        p = Path(in_dir) / f"{tag}_{name}.ckpt"
        if not p.is_file():
            raise FileNotFoundError(f"checkpoint not found: {p}")
        state, _ = checkpoint.load(p, kind=model_kind(mode, name), config=cfg.to_dict())
        model.load_state_dict(state)
    return models
