"""Command-line entry point.

Every subcommand works inside one output directory (``--out-dir``,
default ``./run``)::

    <out>/config.json      effective config written by gen-data / pretrain-grouper
    <out>/data/            synthetic dataset
    <out>/grouper/         frozen grouper checkpoints
    <out>/backbone/        pre-trained convolution stages, one set per config
    <out>/runs/<mode>/seed<k>/
    <out>/results.csv      ablation grid
    <out>/report.json      summary written by ``report``

Config resolution: ``--config`` if given, else ``<out>/config.json`` if it
exists, else the built-in defaults. Exit codes: 0 success, 1 usage or
config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import Config, ConfigError, from_dict, load_config
from .train import MODES, UnknownMode, get_mode

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("actfusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON config file")
    p.add_argument("--seed", type=int, help="seed for this step (see the command help)")
    p.add_argument("--out-dir", type=Path, default=Path("run"), help="working directory (default: ./run)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="actfusion", description="Coarse-to-fine features with asynchronous two-stream fusion.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset", description="Generate and save the dataset. --seed sets data.seed.")
    _common(p)

    p = sub.add_parser("pretrain-grouper", help="pre-train and freeze the class groupers",
                       description="Pre-train one grouper per stream on a fraction of the training videos. --seed sets grouper.seed.")
    _common(p)
    p.add_argument("--fraction", type=float, help="fraction of training videos used (grouper.fraction)")
    p.add_argument("--iters", type=int, help="SGD iterations (grouper.iterations)")

    mode_help = "one of: " + ", ".join(MODES)
    p = sub.add_parser("train", help="train one mode", description="Train both anchor-direction models (or the frame model) of a mode. --seed sets the training seed.")
    _common(p)
    p.add_argument("--mode", help=mode_help)
    p.add_argument("--iters", type=int, help="override train.iterations")

    p = sub.add_parser("eval", help="evaluate a trained mode on the test split", description="Evaluate stored checkpoints with 12-period score summation. --seed selects the training seed of the run.")
    _common(p)
    p.add_argument("--mode", help=mode_help)
    p.add_argument("--split", default="test", choices=["train", "test"])

    p = sub.add_parser("ablate", help="run the ablation grid and write results.csv",
                       description="Train and evaluate every (mode, seed); finished runs are reused. --seed runs a single seed.")
    _common(p)
    p.add_argument("--modes", help="comma-separated modes (default: ablation.modes)")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: ablation.seeds)")
    p.add_argument("--iters", type=int, help="override train.iterations")

    p = sub.add_parser("report", help="summarise results.csv into report.json",
                       description="Summarise the ablation CSV and stored evaluation reports. --seed keeps only that seed's runs.")
    _common(p)
    return parser


def resolve_config(args) -> Config:
    if args.config is not None:
        return load_config(args.config)
    stored = args.out_dir / "config.json"
    if stored.is_file():
        return from_dict(json.loads(stored.read_text()))
    return Config()


def _store_config(cfg: Config, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def _mode(args, cfg: Config) -> str:
    mode = args.mode or cfg.train.mode
    try:
        get_mode(mode)
    except UnknownMode as e:
        raise UsageError(e.args[0]) from None
    return mode


def _dataset(cfg: Config, out: Path):
    from .pipeline import load_or_generate

    return load_or_generate(cfg, out / "data")


def cmd_gen_data(args, cfg: Config) -> int:
    from .data import generate

    if args.seed is not None:
        cfg = cfg.replace(data={"seed": args.seed})
    ds = generate(cfg.data)
    ds.save(args.out_dir / "data")
    _store_config(cfg, args.out_dir)
    print(f"wrote {ds.n_videos} videos ({len(ds.indices('train'))} train / {len(ds.indices('test'))} test) "
          f"to {args.out_dir / 'data'}")
    return EXIT_OK


def cmd_pretrain_grouper(args, cfg: Config) -> int:
    from .pipeline import pretrain_groupers

    updates = {k: v for k, v in {"seed": args.seed, "fraction": args.fraction, "iterations": args.iters}.items()
               if v is not None}
    if updates:
        cfg = cfg.replace(grouper=updates)
    ds = _dataset(cfg, args.out_dir)
    _, infos = pretrain_groupers(ds, cfg, args.out_dir)
    _store_config(cfg, args.out_dir)
    for s, info in infos.items():
        print(f"grouper {s}: train accuracy {info['train_accuracy']:.3f}, "
              f"held-out accuracy {info['heldout_accuracy']:.3f} (chance {info['chance']:.3f})")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    from .pipeline import run_dir, train_run

    mode = _mode(args, cfg)
    if args.iters is not None:
        cfg = cfg.replace(train={"iterations": args.iters})
    seed = cfg.train.seed if args.seed is None else args.seed
    ds = _dataset(cfg, args.out_dir)
    result, _ = train_run(ds, cfg, mode, seed, args.out_dir)
    for name, records in result.logs.items():
        print(f"{mode} {name}: final loss {records[-1]['loss']:.4f} after {len(records)} iterations")
    print(f"checkpoints in {run_dir(args.out_dir, mode, seed)} ({result.seconds:.1f}s)")
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    from .evaluate import evaluate
    from .pipeline import _seeds, run_config, run_dir
    from .train import load_models

    mode = _mode(args, cfg)
    seed = cfg.train.seed if args.seed is None else args.seed
    ds = _dataset(cfg, args.out_dir)
    rcfg = run_config(cfg, mode, seed)
    rdir = run_dir(args.out_dir, mode, seed)
    rcfg = _train_cfg_from_run(rdir, rcfg)
    models = load_models(rdir, rcfg, mode, ds.input_shape, ds.n_classes)
    report = evaluate(models, ds, rcfg, mode, split=args.split, seeds=_seeds(cfg, seed))
    name = "eval.json" if args.split == "test" else f"eval_{args.split}.json"
    report.save(rdir / name)
    print(f"{mode} seed {seed}: {args.split} accuracy {report.accuracy:.4f} on {report.n_videos} videos "
          f"(report: {rdir / name})")
    return EXIT_OK


def _train_cfg_from_run(rdir: Path, rcfg: Config) -> Config:
    """The config stored in the run's checkpoints (so ``train --iters`` runs evaluate cleanly)."""
    from . import checkpoint

    ckpts = sorted(rdir.glob("final_*.ckpt"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {rdir}; run `actfusion train` first")
    _, header = checkpoint.load(ckpts[0])
    stored = from_dict(header["config"])
    if stored.data != rcfg.data or stored.model != rcfg.model or stored.fusion != rcfg.fusion:
        raise ConfigError(f"{rdir}: checkpoints were trained with a different data/model/fusion config")
    return stored


def cmd_ablate(args, cfg: Config) -> int:
    from .ablation import run_ablation_grid

    if args.iters is not None:
        cfg = cfg.replace(train={"iterations": args.iters})
    modes = [m.strip() for m in args.modes.split(",") if m.strip()] if args.modes else None
    seeds = [args.seed] if args.seed is not None else args.seeds
    ds = _dataset(cfg, args.out_dir)
    result = run_ablation_grid(ds, cfg, args.out_dir, modes, seeds)
    for row in result.rows:
        if row["row_type"] == "aggregate":
            print(f"{row['mode']:<26} {float(row['mean']):.4f} +- {float(row['std']):.4f} (n={row['n_runs']})")
    print(f"wrote {args.out_dir / 'results.csv'}")
    if result.skipped:
        print(f"skipped unknown modes: {', '.join(result.skipped)}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_report(args, cfg: Config) -> int:
    from .ablation import aggregate, read_csv
    from .evaluate import EvalReport
    from .pipeline import run_dir

    path = args.out_dir / "results.csv"
    if not path.is_file():
        raise FileNotFoundError(f"results not found: {path}; run `actfusion ablate` first")
    runs = [r for r in read_csv(path) if r["row_type"] == "run"]
    if args.seed is not None:
        runs = [r for r in runs if int(r["seed"]) == args.seed]
    modes: dict[str, dict] = {}
    for r in runs:
        entry = modes.setdefault(r["mode"], {"accuracies": [], "seeds": [], "traces": {}})
        entry["accuracies"].append(float(r["accuracy"]))
        entry["seeds"].append(int(r["seed"]))
        rep_path = run_dir(args.out_dir, r["mode"], int(r["seed"])) / "eval.json"
        if rep_path.is_file():
            rep = EvalReport.load(rep_path)
            entry["traces"][r["seed"]] = rep.traces
            entry.setdefault("confusion", {})[r["seed"]] = rep.confusion
    for entry in modes.values():
        entry["mean"], entry["std"] = aggregate(entry["accuracies"])
    summary = {"schema_version": 1, "source": str(path), "config": cfg.to_dict(), "modes": modes}
    out = args.out_dir / "report.json"
    out.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    width = max((len(m) for m in modes), default=4)
    print(f"{'mode':<{width}}  mean    std     n")
    for m, e in modes.items():
        print(f"{m:<{width}}  {e['mean']:.4f}  {e['std']:.4f}  {len(e['accuracies'])}")
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-grouper": cmd_pretrain_grouper,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (FileNotFoundError, ConfigError) as e:
        print(f"actfusion: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"actfusion: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - any failure past argument handling is a runtime error
        log.debug("failure", exc_info=True)
        print(f"actfusion: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
