"""Command-line driver: ``dynunet {train,eval,predict,gradcheck,bench}``.

Settings resolve as command-line flags over a JSON config file over built-in
defaults. Every command that writes a run directory builds it under a
temporary name and renames it into place at the end, together with a
``manifest.json`` recording the resolved settings.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import subprocess
import sys
import tempfile
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from .bench import BenchConfig, directional_checks, run_bench, write_bench_csv, write_runs_csv
from .data import make_dataset
from .gradcheck import TARGETS, run_suite
from .io import FormatError, labels_to_pgm, read_pgm, read_tensor, write_pgm, write_tensor
from .network import VARIANTS, desk_config, load_checkpoint
from .tensor import Tensor, no_grad
from .training import EvalReport, TrainConfig, dsc_metric, evaluate, predict_labels, train

logger = logging.getLogger("dynunet")

HELD_OUT_OFFSET = 10_000

DEFAULTS = {
    "train": {
        "variant": "dynamic_unet",
        "levels": 3,
        "classes": 6,
        "iters": 3000,
        "folds": 5,
        "seed": 0,
        "samples": 40,
        "size": 64,
        "batch_size": 2,
        "lr0": 0.01,
    },
    "eval": {"seed": 0, "samples": 20, "size": 64, "fold": 0},
    "predict": {"fold": 0},
    "gradcheck": {"target": "all", "seed": 0, "seeds": 3},
    "bench": {
        "seeds": 3,
        "folds": 2,
        "samples": 40,
        "size": 64,
        "classes": 6,
        "iters": 3000,
        "levels": 3,
        "batch_size": 1,
        "variants": list(VARIANTS),
        "jobs": 1,
    },
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument handling


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", type=Path, help="JSON file with settings (flags take precedence)")
    p.add_argument("--out", type=Path, help="output directory (must not exist yet)")
    p.add_argument("-v", "--verbose", action="store_true")
    flags = {
        "seed": dict(type=int, help="base random seed"),
        "variant": dict(choices=VARIANTS, help="architecture variant"),
        "levels": dict(type=_positive, help="resolution levels of the desk channel plan"),
        "classes": dict(type=_positive, help="number of classes including background"),
        "iters": dict(type=_positive, help="training iterations per fold"),
        "folds": dict(type=_positive, help="cross-validation folds"),
        "samples": dict(type=_positive, help="synthetic samples"),
        "size": dict(type=_positive, help="synthetic image extent"),
        "batch_size": dict(type=_positive, help="training batch size"),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **flags[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="k-fold training of one variant on synthetic data")
    _common(p, "seed", "variant", "levels", "classes", "iters", "folds", "samples", "size", "batch_size")
    p.add_argument("--lr0", type=float, default=None, help="initial learning rate")

    p = sub.add_parser("eval", help="score a checkpoint on held-out synthetic data or DUT1 tensors")
    _common(p, "seed", "samples", "size")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint or train run directory")
    p.add_argument("--fold", type=int, default=None, help="fold to load from a train run directory")
    p.add_argument("--images", type=Path, help="DUT1 tensor [N,1,H,W] of images")
    p.add_argument("--labels", type=Path, help="DUT1 tensor [N,H,W] of integer-valued labels")

    p = sub.add_parser("predict", help="label one image (PGM or DUT1)")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint or train run directory")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--input", type=Path, required=True, help=".pgm (8-bit P5) or .dut1 image")

    p = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    _common(p, "seed", "variant")
    p.add_argument("--target", choices=("all",) + TARGETS, default=None, help="group to check")
    p.add_argument("--seeds", type=_positive, default=None, help="number of seeds")

    p = sub.add_parser("bench", help="train all variants on shared seeds and folds")
    _common(p, "levels", "classes", "iters", "folds", "samples", "size", "batch_size")
    p.add_argument("--seeds", type=_positive, default=None, help="number of seeds (seeds 0..N-1)")
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=None)
    p.add_argument("--jobs", type=_positive, default=None, help="worker processes")
    p.add_argument("--cache", type=Path, default=None, help="directory for resumable per-fold results")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags, in that order."""
    settings = dict(DEFAULTS[args.command])
    if args.config is not None:
        try:
            loaded = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        unknown = set(loaded) - set(settings)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        settings.update(loaded)
    for key in settings:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


# ---------------------------------------------------------------------------
# run directories


def _version() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            check=True,
            cwd=Path(__file__).parent,
        ).stdout.strip()
        return f"{version}+g{rev}"
    except (OSError, subprocess.CalledProcessError):
        return version


class RunDir:
    """Staging directory renamed to ``out`` on success and removed on failure."""

    def __init__(self, out: Path, command: str, settings: dict):
        if out.exists():
            raise UsageError(f"output directory {out} already exists")
        self.out = out
        self.command = command
        self.settings = settings
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.artifacts: list = []
        self.path: Path

    def __enter__(self) -> "RunDir":
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self

    def file(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.path / name

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            shutil.rmtree(self.path, ignore_errors=True)
            return
        manifest = {
            "command": self.command,
            "config": self.settings,
            "seed": self.settings.get("seed"),
            "version": _version(),
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "artifacts": sorted(self.artifacts),
            "argv": sys.argv[1:],
        }
        tmp = self.path / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        tmp.replace(self.path / "manifest.json")
        self.path.replace(self.out)


def _out(args, default: str) -> Path:
    return args.out if args.out is not None else Path("runs") / default


def _load(path: Path, fold):
    if (path / "manifest.json").exists() and (path / "tensors").is_dir():
        return load_checkpoint(path)
    candidate = path / f"fold{fold or 0}" / "checkpoint"
    if (candidate / "manifest.json").exists():
        return load_checkpoint(candidate)
    raise UsageError(f"no checkpoint found at {path} (looked for manifest.json and fold*/checkpoint)")


def _print_report(report: EvalReport) -> None:
    print(f"{'class':>6}  {'dsc':>8}")
    for name, value in report.rows():
        print(f"{name:>6}  {value:8.4f}")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, s: dict) -> int:
    cfg = TrainConfig(lr0=s["lr0"], max_iters=s["iters"], folds=s["folds"], seed=s["seed"], batch_size=s["batch_size"])
    cfg.validate(s["samples"])
    arch = desk_config(s["variant"], num_classes=s["classes"], levels=s["levels"])
    if s["size"] % arch.divisor:
        raise UsageError(f"--size must be a multiple of {arch.divisor} for {s['levels']} levels")
    from .plotting import plot_loss_curves

    dataset = make_dataset(s["seed"], s["samples"], s["size"], s["size"], s["classes"])
    with RunDir(_out(args, f"train-{s['variant']}-s{s['seed']}"), "train", s) as run:
        result = train(cfg, arch, dataset, out_dir=run.path, keep_networks=False, log_every=max(1, cfg.max_iters // 10))
        for f in result.folds:
            run.artifacts += [f"fold{f.fold}/log.csv", f"fold{f.fold}/eval.csv", f"fold{f.fold}/checkpoint"]
        with open(run.file("summary.csv"), "w") as fh:
            k = s["classes"]
            fh.write(",".join(["fold"] + [f"dsc_{c}" for c in range(1, k)] + ["mean"]) + "\n")
            for f in result.folds:
                vals = [f.report.per_class[c] for c in range(1, k)] + [f.report.mean]
                fh.write(",".join([str(f.fold)] + [f"{v:.6f}" for v in vals]) + "\n")
        plot_loss_curves({f"fold {f.fold}": f.log for f in result.folds}, run.file("loss.png"))
    print(f"mean validation DSC over {len(result.folds)} folds: {result.mean_dsc:.4f}")
    print(f"wrote {run.out}")
    return 0


def _external_set(args):
    if (args.images is None) != (args.labels is None):
        raise UsageError("--images and --labels must be given together")
    images = read_tensor(args.images)
    labels = read_tensor(args.labels)
    if images.ndim != 4 or images.shape[1] != 1 or labels.shape != (images.shape[0],) + images.shape[2:]:
        raise UsageError(f"expected images [N,1,H,W] and labels [N,H,W], got {images.shape} and {labels.shape}")
    if not np.all(labels == np.round(labels)):
        raise UsageError("labels must hold integer values")
    return images, labels.astype(np.int64)


def cmd_eval(args, s: dict) -> int:
    net = _load(args.checkpoint, args.fold)
    k = net.config.num_classes
    if args.images is not None or args.labels is not None:
        images, labels = _external_set(args)
        net.check_input(Tensor(images[:1]))
        if labels.min() < 0 or labels.max() >= k:
            raise UsageError(f"labels must lie in [0, {k})")
        pred = predict_labels(net, images)
        per_class = {c: float(np.mean([dsc_metric(p, t, c) for p, t in zip(pred, labels)])) for c in range(1, k)}
        report = EvalReport(per_class, float(np.mean(list(per_class.values()))))
    else:
        if s["size"] % net.config.divisor:
            raise UsageError(f"--size must be a multiple of {net.config.divisor}")
        dataset = make_dataset(s["seed"] + HELD_OUT_OFFSET, s["samples"], s["size"], s["size"], k)
        report = evaluate(net, dataset)
    _print_report(report)
    if args.out is not None:
        from .plotting import plot_bench
        from .training import write_eval_csv

        with RunDir(args.out, "eval", s) as run:
            write_eval_csv(run.file("eval.csv"), report)
            rows = [(net.config.variant, [report.per_class[c] for c in range(1, k)], report.mean)]
            plot_bench(rows, run.file("eval.png"), title="DSC per class")
    return 0


def _read_image(path: Path) -> np.ndarray:
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path).astype(np.float64)[None, None] / 255.0
    if suffix == ".dut1":
        arr = read_tensor(path)
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[:2] != (1, 1):
            raise UsageError(f"DUT1 image must be [H,W], [1,H,W] or [1,1,H,W], got {arr.shape}")
        return arr
    raise UsageError(f"unsupported image type {path.suffix!r}; use .pgm or .dut1")


def cmd_predict(args, s: dict) -> int:
    net = _load(args.checkpoint, args.fold)
    image = _read_image(args.input)
    dtype = net.parameters()[0].dtype
    x = Tensor(image.astype(dtype))
    net.check_input(x)
    with no_grad():
        logits = net(x).data
    labels = logits.argmax(axis=1)[0]
    with RunDir(_out(args, f"predict-{args.input.stem}"), "predict", {**s, "input": str(args.input)}) as run:
        write_pgm(run.file("labels.pgm"), labels_to_pgm(labels, net.config.num_classes))
        write_tensor(run.file("logits.dut1"), logits)
    counts = np.bincount(labels.ravel(), minlength=net.config.num_classes)
    print("pixels per class: " + " ".join(f"{c}:{n}" for c, n in enumerate(counts)))
    print(f"wrote {run.out}")
    return 0


def cmd_gradcheck(args, s: dict) -> int:
    target = args.variant or s["target"]
    seeds = tuple(range(s["seed"], s["seed"] + s["seeds"]))
    t0 = time.perf_counter()
    reports = run_suite(target, seeds=seeds)
    text = "\n".join(rep.text() for rep in reports)
    print(text)
    failed = [r.label for r in reports if not r.passed]
    summary = f"{len(reports) - len(failed)}/{len(reports)} checks passed in {time.perf_counter() - t0:.1f}s"
    print(summary)
    if args.out is not None:
        with RunDir(args.out, "gradcheck", {**s, "target": target}) as run:
            run.file("gradcheck.txt").write_text(text + "\n" + summary + "\n")
    return 1 if failed else 0


def cmd_bench(args, s: dict) -> int:
    cfg = BenchConfig(
        seeds=s["seeds"],
        folds=s["folds"],
        samples=s["samples"],
        size=s["size"],
        classes=s["classes"],
        iters=s["iters"],
        levels=s["levels"],
        batch_size=s["batch_size"],
        variants=s["variants"],
    )
    arch = desk_config(VARIANTS[0], num_classes=cfg.classes, levels=cfg.levels)
    if cfg.size % arch.divisor:
        raise UsageError(f"--size must be a multiple of {arch.divisor} for {cfg.levels} levels")
    from .plotting import plot_bench

    with RunDir(_out(args, "bench"), "bench", s) as run:
        result = run_bench(cfg, cache_root=args.cache, jobs=s["jobs"])
        write_bench_csv(run.file("bench.csv"), result)
        write_runs_csv(run.file("bench_runs.csv"), result)
        plot_bench(result.variant_table(), run.file("bench.png"))
    rows = result.variant_table()
    width = max(len(v) for v, _, _ in rows)
    for v, _, mean in rows:
        print(f"{v:<{width}}  {mean:.4f}")
    if {"unet", "dynamic_unet"} <= set(cfg.variants):
        for name, verdicts in directional_checks(result).items():
            print(f"{name}: " + " ".join("yes" if ok else "no" for ok in verdicts))
    print(f"wrote {run.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        settings = resolve(args)
        return COMMANDS[args.command](args, settings)
    except (UsageError, ValueError, FormatError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"dynunet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
