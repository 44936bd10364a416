"""Losses, metric, optimiser, k-fold training and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .data import SegSample, stack_batch
from .network import ArchitectureConfig, UNet, build_network, save_checkpoint
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

DICE_EPS = 1e-5
LOG_HEADER = ["iter", "lr", "loss_total", "loss_ce", "loss_dice"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    max_iters: int = 3000
    poly_power: float = 0.9
    momentum: float = 0.99
    nesterov: bool = True
    batch_size: int = 2
    folds: int = 5
    seed: int = 0
    grad_clip: Optional[float] = 12.0

    def validate(self, dataset_size: Optional[int] = None) -> None:
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.folds < 1 or (dataset_size is not None and self.folds > dataset_size):
            raise ValueError(f"folds must be in [1, {dataset_size}], got {self.folds}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses and metric


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), found range [{labels.min()}, {labels.max()}]")
    return labels


def one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    """``[N, H, W]`` integer labels to ``[N, K, H, W]``."""
    return (labels[:, None] == np.arange(k)[None, :, None, None]).astype(dtype)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[true class]``."""
    n, k, h, w = logits.shape
    labels = _check_labels(labels, k)
    q = Tensor(one_hot(labels, k, logits.dtype))
    picked = F.sum(F.mul(F.log_softmax(logits, axis=1), q))
    return F.scale(picked, -1.0 / (n * h * w))


def soft_dice_loss(logits: Tensor, labels, eps: float = DICE_EPS) -> Tensor:
    """``1 - mean_k (2 sum(p q) + eps) / (sum(p) + sum(q) + eps)`` over
    foreground classes, with sums taken over the whole batch."""
    n, k, h, w = logits.shape
    labels = _check_labels(labels, k)
    q = one_hot(labels, k, logits.dtype)
    p = F.softmax(logits, axis=1)
    inter = F.sum(F.mul(p, Tensor(q)), axis=(0, 2, 3))
    psum = F.sum(p, axis=(0, 2, 3))
    qsum = q.sum(axis=(0, 2, 3))
    dice = F.div(F.add(F.scale(inter, 2.0), eps), F.add(psum, qsum + eps))
    fg = np.ones(k, dtype=logits.dtype)
    fg[0] = 0.0
    return F.sub(1.0, F.scale(F.sum(F.mul(dice, Tensor(fg))), 1.0 / (k - 1)))


def combined_loss(logits: Tensor, labels):
    ce = cross_entropy_loss(logits, labels)
    dice = soft_dice_loss(logits, labels)
    return F.add(ce, dice), ce, dice


def dsc_metric(pred, true, k: int) -> float:
    """Dice coefficient of class ``k``; 1.0 when absent from both maps."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    a, b = pred == k, true == k
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


# ---------------------------------------------------------------------------
# optimisation


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    frac = min(max(iteration / cfg.max_iters, 0.0), 1.0)
    return cfg.lr0 * (1.0 - frac) ** cfg.poly_power


class SGD:
    """Momentum SGD: ``v <- mu v - lr g``; the step is ``v`` or, with Nesterov,
    ``mu v - lr g``."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.99, nesterov: bool = True):
        self.params = list(params)
        self.momentum = momentum
        self.nesterov = nesterov
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.velocity, lr, self.momentum, self.nesterov)


def sgd_step(params, grads, velocity, lr: float, momentum: float, nesterov: bool) -> None:
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        v *= momentum
        v -= lr * g
        if nesterov:
            p.data += momentum * v - lr * g
        else:
            p.data += v


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        factor = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total


# ---------------------------------------------------------------------------
# training loop


def kfold_indices(n: int, folds: int, seed: int) -> list:
    """Seeded partition of ``range(n)`` into ``folds`` disjoint validation sets."""
    if not 1 <= folds <= n:
        raise ValueError(f"folds must be in [1, {n}], got {folds}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


@dataclass
class EvalReport:
    per_class: dict
    mean: float

    def rows(self) -> list:
        return [(str(k), v) for k, v in self.per_class.items()] + [("mean", self.mean)]


def predict_labels(net: UNet, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    out = []
    dtype = net.parameters()[0].dtype
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = net(Tensor(np.asarray(images[i : i + batch_size], dtype=dtype)))
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(net: UNet, dataset: Sequence[SegSample]) -> EvalReport:
    """Per-class DSC averaged over cases, plus the foreground mean."""
    k = net.config.num_classes
    images, labels = stack_batch(dataset)
    pred = predict_labels(net, images)
    per_class = {}
    for c in range(1, k):
        per_class[c] = float(np.mean([dsc_metric(p, t, c) for p, t in zip(pred, labels)]))
    return EvalReport(per_class=per_class, mean=float(np.mean(list(per_class.values()))))


def write_eval_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["class", "dsc"])
        for name, v in report.rows():
            wr.writerow([name, f"{v:.6f}"])


@dataclass
class FoldResult:
    fold: int
    train_idx: list
    val_idx: list
    log: list
    report: EvalReport
    network: Optional[UNet] = None


@dataclass
class TrainResult:
    folds: list = field(default_factory=list)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([f.report.mean for f in self.folds]))

    @property
    def network(self) -> UNet:
        return self.folds[-1].network


def fit(
    net: UNet,
    samples: Sequence[SegSample],
    cfg: TrainConfig,
    rng: np.random.Generator,
    context: str = "",
    log_every: int = 0,
) -> list:
    """Train ``net`` in place on ``samples``; returns the per-iteration log rows."""
    dtype = net.parameters()[0].dtype
    params = net.parameters()
    opt = SGD(params, momentum=cfg.momentum, nesterov=cfg.nesterov)
    images, labels = stack_batch(samples, dtype=dtype)
    order = np.empty(0, dtype=np.int64)
    log = []
    for it in range(cfg.max_iters):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(samples))])
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        lr = poly_lr(it, cfg)
        net.zero_grad()
        logits = net(Tensor(images[idx]))
        total, ce, dice = combined_loss(logits, labels[idx])
        lt = total.item()
        if not math.isfinite(lt):
            raise TrainingDiverged(f"non-finite loss {lt} at iteration {it}{context}")
        backward(total)
        if cfg.grad_clip:
            clip_grad_norm(params, cfg.grad_clip)
        opt.step(lr)
        net.step += 1
        log.append((it, lr, lt, ce.item(), dice.item()))
        if log_every and it % log_every == 0:
            logger.info("iter %d lr %.5f loss %.4f%s", it, lr, lt, context)
    return log


def write_log_csv(path, log: list) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_HEADER)
        for it, lr, lt, ce, dc in log:
            wr.writerow([it, f"{lr:.8f}", f"{lt:.8f}", f"{ce:.8f}", f"{dc:.8f}"])


def train_fold(
    cfg: TrainConfig,
    arch: ArchitectureConfig,
    dataset: Sequence[SegSample],
    fold: int,
    train_idx,
    val_idx,
    log_every: int = 0,
    dtype=np.float32,
):
    """Train one fold from its own seed; returns ``(net, log, report)``."""
    net = build_network(arch, seed=cfg.seed * 1000 + fold, dtype=dtype)
    rng = np.random.default_rng([cfg.seed, fold])
    log = fit(net, [dataset[i] for i in train_idx], cfg, rng, context=f" (fold {fold})", log_every=log_every)
    report = evaluate(net, [dataset[i] for i in val_idx])
    logger.info("fold %d %s mean DSC %.4f", fold, arch.variant, report.mean)
    return net, log, report


def fold_splits(n: int, cfg: TrainConfig) -> list:
    """``(train_idx, val_idx)`` pairs; a single fold trains and scores on everything."""
    if cfg.folds == 1:
        return [(np.arange(n), np.arange(n))]
    return [(np.setdiff1d(np.arange(n), val), val) for val in kfold_indices(n, cfg.folds, cfg.seed)]


def train(
    cfg: TrainConfig,
    arch: ArchitectureConfig,
    dataset: Sequence[SegSample],
    out_dir=None,
    keep_networks: bool = True,
    log_every: int = 0,
    dtype=np.float32,
) -> TrainResult:
    """k-fold training. With ``folds == 1`` the model is trained and scored on
    the full dataset (a memorisation run)."""
    cfg.validate(len(dataset))
    result = TrainResult()
    for fold, (train_idx, val_idx) in enumerate(fold_splits(len(dataset), cfg)):
        net, log, report = train_fold(cfg, arch, dataset, fold, train_idx, val_idx, log_every, dtype)
        if out_dir is not None:
            fdir = Path(out_dir) / f"fold{fold}"
            fdir.mkdir(parents=True, exist_ok=True)
            write_log_csv(fdir / "log.csv", log)
            write_eval_csv(fdir / "eval.csv", report)
            save_checkpoint(net, fdir / "checkpoint", extra={"train_config": cfg.to_dict(), "fold": fold})
        result.folds.append(
            FoldResult(fold, train_idx.tolist(), val_idx.tolist(), log, report, net if keep_networks else None)
        )
    return result
