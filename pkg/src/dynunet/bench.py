"""Ablation benchmark: every variant trained on the same seeds and folds.

Each (variant, seed, fold) run is stored as a small JSON record under a cache
directory keyed by a fingerprint of the run settings and of the numeric source
files, so an interrupted benchmark resumes where it stopped and a finished one
can be re-tabulated without retraining.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import make_dataset
from .network import VARIANTS, desk_config
from .training import TrainConfig, fold_splits, train_fold

logger = logging.getLogger(__name__)

# Modules whose code determines training results.
NUMERIC_MODULES = ("tensor", "functional", "deform", "nn", "calib", "network", "data", "training")


@dataclass
class BenchConfig:
    seeds: int = 3
    folds: int = 2
    samples: int = 40
    size: int = 64
    classes: int = 6
    iters: int = 3000
    levels: int = 3
    batch_size: int = 1
    variants: tuple = VARIANTS

    def __post_init__(self):
        self.variants = tuple(self.variants)
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variants {sorted(unknown)}; valid variants: {', '.join(VARIANTS)}")
        if self.seeds < 1 or self.samples < 2 or self.iters < 1:
            raise ValueError("seeds, iters must be >= 1 and samples >= 2")
        if not 2 <= self.folds <= self.samples:
            raise ValueError(f"bench needs 2 <= folds <= samples, got folds={self.folds}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = list(self.variants)
        return d


@dataclass(frozen=True)
class RunKey:
    variant: str
    seed: int
    fold: int

    @property
    def stem(self) -> str:
        return f"{self.variant}_s{self.seed}_f{self.fold}"


@dataclass
class BenchResult:
    config: BenchConfig
    runs: dict = field(default_factory=dict)  # RunKey -> {"per_class": [...], "mean": float}

    def variant_table(self) -> list:
        """One row per variant: per-class DSC and mean, averaged over all runs."""
        rows = []
        for v in self.config.variants:
            recs = [r for k, r in self.runs.items() if k.variant == v]
            per_class = np.mean([r["per_class"] for r in recs], axis=0)
            rows.append((v, per_class.tolist(), float(np.mean([r["mean"] for r in recs]))))
        return rows

    def seed_means(self) -> dict:
        """``{variant: [mean DSC of seed 0, seed 1, ...]}`` averaged over folds."""
        out = {}
        for v in self.config.variants:
            out[v] = [
                float(np.mean([r["mean"] for k, r in self.runs.items() if k.variant == v and k.seed == s]))
                for s in range(self.config.seeds)
            ]
        return out


def source_digest() -> str:
    h = hashlib.sha256(np.__version__.encode())
    here = Path(__file__).parent
    for name in NUMERIC_MODULES:
        h.update((here / f"{name}.py").read_bytes())
    return h.hexdigest()


def fingerprint(settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True) + source_digest()
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cached(cache_dir: Optional[Path], name: str, compute: Callable[[], dict]) -> dict:
    """Return the JSON record ``cache_dir/name.json``, computing and storing it if absent."""
    if cache_dir is None:
        return compute()
    path = Path(cache_dir) / f"{name}.json"
    if path.exists():
        return json.loads(path.read_text())
    record = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record, sort_keys=True))
    tmp.replace(path)
    return record


def train_config(cfg: BenchConfig, seed: int) -> TrainConfig:
    return TrainConfig(max_iters=cfg.iters, folds=cfg.folds, seed=seed, batch_size=cfg.batch_size)


def _run(cfg: BenchConfig, key: RunKey, cache_dir: Optional[Path]) -> dict:
    def compute():
        tcfg = train_config(cfg, key.seed)
        dataset = make_dataset(key.seed, cfg.samples, cfg.size, cfg.size, cfg.classes)
        train_idx, val_idx = fold_splits(len(dataset), tcfg)[key.fold]
        arch = desk_config(key.variant, num_classes=cfg.classes, levels=cfg.levels)
        _, log, report = train_fold(tcfg, arch, dataset, key.fold, train_idx, val_idx)
        return {
            "per_class": [report.per_class[c] for c in sorted(report.per_class)],
            "mean": report.mean,
            "final_loss": log[-1][2],
        }

    record = cached(cache_dir, key.stem, compute)
    logger.info("%s mean DSC %.4f", key.stem, record["mean"])
    return record


def run_bench(cfg: BenchConfig, cache_root=None, jobs: int = 1) -> BenchResult:
    """Train every (variant, seed, fold); reuses records under ``cache_root``."""
    cache_dir = None
    if cache_root is not None:
        cache_dir = Path(cache_root) / fingerprint(cfg.to_dict())
    keys = [RunKey(v, s, f) for s in range(cfg.seeds) for f in range(cfg.folds) for v in cfg.variants]
    result = BenchResult(cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run, [cfg] * len(keys), keys, [cache_dir] * len(keys)))
    else:
        records = [_run(cfg, k, cache_dir) for k in keys]
    result.runs = dict(zip(keys, records))
    return result


def write_bench_csv(path, result: BenchResult) -> None:
    k = result.config.classes
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["variant"] + [f"dsc_{c}" for c in range(1, k)] + ["mean"])
        for v, per_class, mean in result.variant_table():
            wr.writerow([v] + [f"{d:.6f}" for d in per_class] + [f"{mean:.6f}"])


def write_runs_csv(path, result: BenchResult) -> None:
    k = result.config.classes
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["variant", "seed", "fold"] + [f"dsc_{c}" for c in range(1, k)] + ["mean"])
        for key in sorted(result.runs, key=lambda r: (result.config.variants.index(r.variant), r.seed, r.fold)):
            rec = result.runs[key]
            wr.writerow(
                [key.variant, key.seed, key.fold] + [f"{d:.6f}" for d in rec["per_class"]] + [f"{rec['mean']:.6f}"]
            )


def memorization_run(
    variant: str, cache_root=None, samples: int = 4, iters: int = 2000, seed: int = 0, size: int = 64, classes: int = 6
) -> dict:
    """Train and score one variant on the same few samples."""
    settings = {
        "kind": "memorize",
        "variant": variant,
        "samples": samples,
        "iters": iters,
        "seed": seed,
        "size": size,
        "classes": classes,
    }
    cache_dir = None if cache_root is None else Path(cache_root) / fingerprint(settings)

    def compute():
        tcfg = TrainConfig(max_iters=iters, folds=1, seed=seed)
        dataset = make_dataset(seed, samples, size, size, classes)
        idx = np.arange(samples)
        _, log, report = train_fold(tcfg, desk_config(variant, num_classes=classes), dataset, 0, idx, idx)
        return {"per_class": [report.per_class[c] for c in sorted(report.per_class)], "mean": report.mean, "log": log}

    return cached(cache_dir, f"memorize_{variant}", compute)


def directional_checks(result: BenchResult, margin: float = 0.01) -> dict:
    """Per-seed verdicts of ``dynamic >= unet`` and ``ablation >= unet - margin``;
    the ``all`` entry is their per-seed conjunction."""
    means = result.seed_means()
    base = means["unet"]
    checks = {"dynamic_unet >= unet": [d >= u for d, u in zip(means["dynamic_unet"], base)]}
    for v in ("sconv_unet", "dcc_unet", "dcd_unet", "dcu_unet"):
        if v in means:
            checks[f"{v} >= unet - {margin}"] = [a >= u - margin for a, u in zip(means[v], base)]
    checks["all"] = [all(col) for col in zip(*checks.values())]
    return checks


def default_jobs() -> int:
    return max(1, min(len(VARIANTS), os.cpu_count() or 1))
