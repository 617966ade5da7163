"""Ablation grid over (mode, seed) with CSV output.

CSV schema (version 1, column order fixed)::

    row_type, mode, seed, accuracy, mean, std, n_runs, n_test, config_fingerprint

``row_type`` is ``run`` for one (mode, seed) or ``aggregate`` for the
per-mode summary. Run rows leave ``mean``/``std``/``n_runs`` empty;
aggregate rows leave ``seed``/``accuracy``/``n_test``/``config_fingerprint``
empty. ``std`` is the sample standard deviation (0 for a single run).
Accuracies are fractions in [0, 1] with six decimals.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean, stdev

from .config import Config
from .pipeline import groupers_for, train_and_evaluate
from .train import MODES, get_mode

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
COLUMNS = ["row_type", "mode", "seed", "accuracy", "mean", "std", "n_runs", "n_test", "config_fingerprint"]


@dataclass
class GridResult:
    rows: list[dict]
    skipped: list[str] = field(default_factory=list)
    accuracies: dict[str, list[float]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.skipped


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def aggregate(accs: list[float]) -> tuple[float, float]:
    return mean(accs), (stdev(accs) if len(accs) > 1 else 0.0)


def grid_rows(results: dict[str, list[tuple[int, float, int, str]]]) -> list[dict]:
    """Run rows in grid order followed by one aggregate row per mode."""
    rows = []
    for mode, runs in results.items():
        for seed, acc, n_test, fp in runs:
            rows.append({"row_type": "run", "mode": mode, "seed": str(seed), "accuracy": _fmt(acc), "mean": "",
                         "std": "", "n_runs": "", "n_test": str(n_test), "config_fingerprint": fp})
    for mode, runs in results.items():
        m, s = aggregate([r[1] for r in runs])
        rows.append({"row_type": "aggregate", "mode": mode, "seed": "", "accuracy": "", "mean": _fmt(m),
                     "std": _fmt(s), "n_runs": str(len(runs)), "n_test": "", "config_fingerprint": ""})
    return rows


def write_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def run_ablation_grid(dataset, cfg: Config, out_dir, modes: list[str] | None = None,
                      seeds: list[int] | None = None, csv_name: str = "results.csv") -> GridResult:
    """Train and evaluate every (mode, seed); finished runs with a matching config are reused."""
    modes = list(cfg.ablation.modes if modes is None else modes)
    seeds = list(cfg.ablation.seeds if seeds is None else seeds)
    known = [m for m in modes if m in MODES]
    skipped = [m for m in modes if m not in MODES]
    for m in skipped:
        log.error("skipping unknown mode %r (known: %s)", m, ", ".join(MODES))
    groupers = None
    if any(get_mode(m).needs_grouper for m in known):
        groupers = groupers_for(cfg, dataset, out_dir)
    results: dict[str, list[tuple[int, float, int, str]]] = {}
    for mode in known:
        for seed in seeds:
            log.info("run %s seed %d", mode, seed)
            rep = train_and_evaluate(dataset, cfg, mode, seed, out_dir, groupers=groupers)
            results.setdefault(mode, []).append((seed, rep.accuracy, rep.n_videos, rep.config_fingerprint))
    rows = grid_rows(results)
    write_csv(Path(out_dir) / csv_name, rows)
    return GridResult(rows, skipped, {m: [r[1] for r in runs] for m, runs in results.items()})
