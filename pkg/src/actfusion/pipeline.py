"""Orchestration shared by the CLI and the ablation grid.

Run directory layout::

    <out>/grouper/grouper_s1.ckpt, grouper_s2.ckpt, grouper_info.json
    <out>/backbone/<config fingerprint>/backbone_s1.ckpt, backbone_s2.ckpt, backbone_info.json
    <out>/runs/<mode>/seed<k>/final_<model>.ckpt, train_log_<model>.jsonl, eval.json
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import fingerprint
from .config import Config
from .backbone import pretrain_backbones
from .data import Dataset, generate
from .evaluate import EvalReport, evaluate, single_model_accuracy
from .grouper import GrouperModel, pretrain_grouper
from .train import get_mode, load_models, save_models, train_mode

log = logging.getLogger(__name__)

GROUPER_KIND = "grouper"
BACKBONE_KIND = "backbone"


def load_or_generate(cfg: Config, data_dir=None) -> Dataset:
    if data_dir and (Path(data_dir) / "manifest.json").is_file():
        ds = Dataset.load(data_dir)
        if ds.config != cfg.data:
            raise ValueError(f"dataset at {data_dir} was generated with a different data config")
        return ds
    ds = generate(cfg.data)
    if data_dir:
        ds.save(data_dir)
    return ds


def grouper_paths(out_dir) -> dict[str, Path]:
    g = Path(out_dir) / "grouper"
    return {"s1": g / "grouper_s1.ckpt", "s2": g / "grouper_s2.ckpt", "info": g / "grouper_info.json"}


def _grouper_config(cfg: Config, dataset: Dataset) -> dict:
    return {"grouper": cfg.to_dict()["grouper"], "data": cfg.to_dict()["data"], "input_shape": list(dataset.input_shape)}


def pretrain_groupers(dataset: Dataset, cfg: Config, out_dir=None, seed: int | None = None):
    """Pre-train (and freeze) the grouper for each stream; writes checkpoints when ``out_dir`` is set."""
    gcfg = cfg.grouper if seed is None else cfg.replace(grouper={"seed": seed}).grouper
    models, infos = {}, {}
    if gcfg.per_stream:
        for s in ("s1", "s2"):
            models[s], infos[s] = pretrain_grouper(dataset, gcfg, streams=(s,))
    else:
        shared, info = pretrain_grouper(dataset, gcfg, streams=("s1", "s2"))
        models = {"s1": shared, "s2": shared}
        infos = {"s1": info, "s2": info}
    if out_dir:
        paths = grouper_paths(out_dir)
        run_cfg = cfg.replace(grouper={"seed": gcfg.seed})
        for s in ("s1", "s2"):
            checkpoint.save(paths[s], models[s].state_dict(), GROUPER_KIND, _grouper_config(run_cfg, dataset),
                            {"stream": s, **{k: v for k, v in infos[s].items() if k != "videos"}})
        paths["info"].write_text(json.dumps(infos, indent=1, sort_keys=True) + "\n")
    return models, infos


def load_groupers(out_dir, cfg: Config, dataset: Dataset) -> dict[str, GrouperModel]:
    paths = grouper_paths(out_dir)
    models = {}
    for s in ("s1", "s2"):
        if not paths[s].is_file():
            raise FileNotFoundError(f"grouper checkpoint not found: {paths[s]}")
        state, _ = checkpoint.load(paths[s], kind=GROUPER_KIND, config=_grouper_config(cfg, dataset))
        g = GrouperModel(dataset.input_shape, dataset.n_classes, cfg.grouper.channels, np.random.default_rng(0))
        g.load_state_dict(state)
        models[s] = g.freeze()
    return models


def groupers_for(cfg: Config, dataset: Dataset, out_dir) -> dict[str, GrouperModel]:
    try:
        return load_groupers(out_dir, cfg, dataset)
    except FileNotFoundError:
        log.info("pre-training groupers")
        models, _ = pretrain_groupers(dataset, cfg, out_dir)
        return models


def _backbone_config(cfg: Config, dataset: Dataset) -> dict:
    d = cfg.to_dict()
    return {"backbone": d["backbone"], "model": d["model"], "data": d["data"], "input_shape": list(dataset.input_shape)}


def backbone_dir(out_dir, cfg: Config, dataset: Dataset) -> Path:
    return Path(out_dir) / "backbone" / fingerprint(_backbone_config(cfg, dataset))[:12]


def backbones_for(cfg: Config, dataset: Dataset, out_dir=None) -> dict[str, dict] | None:
    """Pre-trained convolution stages per stream, loaded from ``out_dir`` or trained and stored there."""
    if cfg.backbone.iterations <= 0:
        return None
    bcfg = _backbone_config(cfg, dataset)
    bdir = backbone_dir(out_dir, cfg, dataset) if out_dir else None
    if bdir and all((bdir / f"backbone_{s}.ckpt").is_file() for s in ("s1", "s2")):
        return {s: checkpoint.load(bdir / f"backbone_{s}.ckpt", kind=BACKBONE_KIND, config=bcfg)[0]
                for s in ("s1", "s2")}
    log.info("pre-training backbones")
    states, infos = pretrain_backbones(dataset, cfg)
    if bdir:
        for s in ("s1", "s2"):
            checkpoint.save(bdir / f"backbone_{s}.ckpt", states[s], BACKBONE_KIND, bcfg, infos[s])
        (bdir / "backbone_info.json").write_text(json.dumps(infos, indent=1, sort_keys=True) + "\n")
    return states


def grouper_digests(out_dir) -> dict[str, str]:
    paths = grouper_paths(out_dir)
    return {s: checkpoint.file_digest(paths[s]) for s in ("s1", "s2") if paths[s].is_file()}


def run_config(cfg: Config, mode: str, seed: int) -> Config:
    return cfg.replace(train={"mode": mode, "seed": seed})


def run_dir(out_dir, mode: str, seed: int) -> Path:
    return Path(out_dir) / "runs" / mode / f"seed{seed}"


def completed_report(out_dir, cfg: Config, mode: str, seed: int) -> EvalReport | None:
    """The stored report of a finished run, if its config matches."""
    p = run_dir(out_dir, mode, seed) / "eval.json"
    if not p.is_file():
        return None
    report = EvalReport.load(p)
    if report.config_fingerprint != fingerprint(run_config(cfg, mode, seed).to_dict()):
        return None
    return report


def train_run(dataset: Dataset, cfg: Config, mode: str, seed: int, out_dir,
              groupers: dict[str, GrouperModel] | None = None):
    """Train one (mode, seed) and write final checkpoints and logs under the run directory."""
    rcfg = run_config(cfg, mode, seed)
    spec = get_mode(mode)
    if spec.needs_grouper and groupers is None:
        groupers = groupers_for(rcfg, dataset, out_dir)
    before = grouper_digests(out_dir) if spec.needs_grouper else {}
    rdir = run_dir(out_dir, mode, seed)
    on_eval = None
    if rcfg.train.eval_every:
        def on_eval(name, model, it):
            return single_model_accuracy(model, dataset, rcfg, mode)
    result = train_mode(dataset, rcfg, mode, seed, groupers=groupers if spec.needs_grouper else None,
                        out_dir=rdir, on_eval=on_eval, backbones=backbones_for(rcfg, dataset, out_dir))
    if spec.needs_grouper and grouper_digests(out_dir) != before:
        raise RuntimeError("grouper checkpoint changed during training")
    save_models(rdir, result.models, rcfg, mode, {"seed": seed, "iterations": rcfg.train.iterations})
    return result, before


def train_and_evaluate(dataset: Dataset, cfg: Config, mode: str, seed: int, out_dir,
                       groupers: dict[str, GrouperModel] | None = None, resume: bool = True) -> EvalReport:
    """Train one (mode, seed), evaluate it on the test split and store the report next to the checkpoints."""
    if resume:
        done = completed_report(out_dir, cfg, mode, seed)
        if done is not None:
            log.info("reusing finished run %s seed %d", mode, seed)
            return done
    result, digests = train_run(dataset, cfg, mode, seed, out_dir, groupers)
    report = evaluate(result.models, dataset, run_config(cfg, mode, seed), mode, seeds=_seeds(cfg, seed))
    report.extra["grouper_digests"] = digests
    report.save(run_dir(out_dir, mode, seed) / "eval.json")
    return report


def _seeds(cfg: Config, seed: int) -> dict[str, int]:
    return {"data": cfg.data.seed, "grouper": cfg.grouper.seed, "train": seed}


def evaluate_run(dataset: Dataset, cfg: Config, mode: str, seed: int, out_dir) -> EvalReport:
    rcfg = run_config(cfg, mode, seed)
    models = load_models(run_dir(out_dir, mode, seed), rcfg, mode, dataset.input_shape, dataset.n_classes)
    return evaluate(models, dataset, rcfg, mode, seeds=_seeds(cfg, seed))
