"""Training loop: Adam, BCE/Dice losses, plateau LR schedule (x0.25 after 4
stagnant epochs), early stopping, best-checkpoint tracking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import SegmentationSample, batch_iter
from .gradcheck import GradTape
from .metrics import binarize, compute_metrics, confusion
from .model import TeslNet, save_weights
from .tensor import Param, Tensor

EPS_PROB = 1e-7
LOSS_KINDS = ("bce", "dice", "bce+dice")


class NumericalAbort(RuntimeError):
    """Loss went non-finite; message names the offending batch."""


@dataclass
class TrainConfig:
    epochs: int = 10
    lr0: float = 0.001
    lr_factor: float = 0.25
    lr_patience: int = 4
    early_stop_patience: int = 6
    batch_size: int = 8
    loss: str = "bce+dice"
    seed: int = 0
    improve_threshold: float = 1e-4

    def validate(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")


# -- losses -------------------------------------------------------------

def bce_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    g = np.asarray(gt, dtype=pred.dtype)
    p = T.clip(pred, EPS_PROB, 1.0 - EPS_PROB)
    return -(Tensor(g) * T.log(p) + Tensor(1.0 - g) * T.log(1.0 - p)).mean()


def dice_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    g = Tensor(np.asarray(gt, dtype=pred.dtype))
    inter = (pred * g).sum()
    return 1.0 - (2.0 * inter + 1.0) / (pred.sum() + g.sum() + 1.0)


def loss_fn(pred: Tensor, gt: np.ndarray, kind: str = "bce+dice") -> Tensor:
    if pred.shape != np.asarray(gt).shape:
        raise ValueError(f"pred {pred.shape} vs gt {np.asarray(gt).shape}")
    if kind == "bce":
        return bce_loss(pred, gt)
    if kind == "dice":
        return dice_loss(pred, gt)
    if kind == "bce+dice":
        return bce_loss(pred, gt) + dice_loss(pred, gt)
    raise ValueError(f"unknown loss kind {kind!r}")


# -- optimizer ----------------------------------------------------------

class Adam:
    """Bias-corrected Adam; grads are zeroed after each applied step."""

    def __init__(self, params: Sequence[Param], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr: float):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad[...] = 0.0


# -- schedule -----------------------------------------------------------

def plan_schedule(val_history: Sequence[float], cfg: TrainConfig,
                  ) -> list[tuple[float, str]]:
    """Pure replay of the LR/stop decisions from a validation-metric history.

    Returns, per epoch, (lr used during that epoch, action taken after it),
    action in {none, reduce_lr, early_stop}. An epoch improves when its
    metric beats the best seen so far by more than the threshold; the LR
    stagnation counter resets on improvement or reduction, the stop counter
    only on improvement.
    """
    out = []
    lr = cfg.lr0
    best = -np.inf
    since_improve = 0
    since_lr_event = 0
    for metric in val_history:
        lr_used = lr
        if metric > best + cfg.improve_threshold:
            best = metric
            since_improve = 0
            since_lr_event = 0
            action = "none"
        else:
            since_improve += 1
            since_lr_event += 1
            if since_improve >= cfg.early_stop_patience:
                action = "early_stop"
            elif since_lr_event >= cfg.lr_patience:
                lr *= cfg.lr_factor
                since_lr_event = 0
                action = "reduce_lr"
            else:
                action = "none"
        out.append((lr_used, action))
        if action == "early_stop":
            break
    return out


# -- fit ----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_acc: float
    val_se: float
    val_sp: float
    val_iou: float
    val_dice: float
    lr: float
    action: str


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_dice: float = 0.0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.epochs)


def evaluate(net: TeslNet, ids: Sequence[str],
             loader: Callable[[str], SegmentationSample],
             batch_size: int = 8, threshold: float = 0.5):
    """Mean-per-image metrics plus per-image confusion counts, inference mode."""
    rows, counts = [], []
    for chunk, images, masks in batch_iter(ids, loader, batch_size, shuffle=False):
        pred = net.forward(Tensor(images.astype(np.float32)), training=False)
        binary = binarize(pred.data, threshold)
        for i, sid in enumerate(chunk):
            c = confusion(binary[i, 0], masks[i, 0])
            counts.append((sid, c))
            rows.append(compute_metrics(c))
    mean = {f: float(np.mean([getattr(r, f) for r in rows]))
            for f in ("acc", "se", "sp", "iou", "dice")}
    return mean, counts


def fit(net: TeslNet, train_ids: Sequence[str], val_ids: Sequence[str],
        loader: Callable[[str], SegmentationSample], cfg: TrainConfig,
        outdir=None) -> TrainingLog:
    """Run the full training protocol; returns the per-epoch log.

    Checkpoints (best-validation and final weights, JSONL log) are written
    under ``outdir`` when given.
    """
    cfg.validate()
    if not train_ids or not val_ids:
        raise ValueError("train and val splits must be nonempty")
    opt = Adam(net.params())
    log = TrainingLog()
    history: list[float] = []
    best_blob: Optional[bytes] = None

    for epoch in range(1, cfg.epochs + 1):
        planned = plan_schedule(history + [np.inf], cfg)
        lr = planned[-1][0]
        losses = []
        for chunk, images, masks in batch_iter(
                train_ids, loader, cfg.batch_size, seed=cfg.seed + epoch, shuffle=True):
            with GradTape() as tape:
                pred = net.forward(Tensor(images.astype(np.float32)), training=True)
                loss = loss_fn(pred, masks.astype(np.float32), cfg.loss)
                if not np.isfinite(loss.item()):
                    raise NumericalAbort(
                        f"non-finite loss at epoch {epoch}, batch ids {chunk}")
                tape.backward(loss)
            opt.step(lr)
            losses.append(loss.item())

        val, _ = evaluate(net, val_ids, loader, cfg.batch_size)
        history.append(val["dice"])
        lr_used, action = plan_schedule(history, cfg)[-1]
        assert lr_used == lr
        rec = EpochRecord(epoch=epoch, mean_loss=float(np.mean(losses)),
                          val_acc=val["acc"], val_se=val["se"], val_sp=val["sp"],
                          val_iou=val["iou"], val_dice=val["dice"],
                          lr=lr, action=action)
        log.epochs.append(rec)
        if val["dice"] >= log.best_val_dice or best_blob is None:
            log.best_val_dice = val["dice"]
            log.best_epoch = epoch
            best_blob = save_weights(net)
        if action == "early_stop":
            break

    if outdir is not None:
        from pathlib import Path
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "log.jsonl").write_text(log.to_jsonl())
        (outdir / "best.weights").write_bytes(best_blob)
        (outdir / "final.weights").write_bytes(save_weights(net))
    return log
