"""Training/evaluation loops and the two-phase (binary activations, then binary weights) protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import data as D
from . import functional as F
from .nn import BatchNorm2d, Module
from .ops import ConvOp, DomainMode, set_packed
from .optim import SGD, Adam, CosineSchedule, Optimizer
from .tensor import Tensor, backward, default_dtype, no_grad


@dataclass
class TrainConfig:
    """Evaluation-training knobs. Defaults follow the full-scale CIFAR-10 protocol except ``epochs``."""

    epochs: int = 8
    batch_size: int = 96
    optimizer: str = "adam"  # "sgd" for the real-valued appendix setting (lr 0.1, momentum 0.9)
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    momentum: float = 0.9
    weight_decay: float = 0.0
    cosine: bool = True
    pad_crop: int = 4
    flip: bool = True
    cutout: int = 16
    mixup: float = 0.0
    downsample: int = 1
    dtype: str = "float32"
    recalibrate_bn: bool = False
    finetune_epochs: int = 0

    @property
    def policy(self) -> D.AugmentPolicy:
        return D.AugmentPolicy(self.pad_crop, self.flip, self.cutout, self.mixup)


def make_optimizer(params, cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.betas, cfg.weight_decay)
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def prepare(ds: D.Dataset, downsample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (and optionally block-downsampled) images with their labels."""
    return D.downsample(ds.normalized(), downsample), ds.labels


def check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at {where}")


def train_epoch(net: Module, opt: Optimizer, x: np.ndarray, y: np.ndarray, k: int, cfg: TrainConfig,
                rng: np.random.Generator, schedule: Optional[CosineSchedule] = None) -> tuple[float, float]:
    """One pass over (x, y) with augmentation; returns mean loss and accuracy."""
    net.train()
    dtype = net.classifier.weight.dtype
    tot_loss = tot_correct = 0.0
    n = 0
    for idx in D.batches(len(x), cfg.batch_size, rng):
        xb, yb = D.augment(x[idx], y[idx], k, cfg.policy, rng)
        logits = net(Tensor(xb.astype(dtype)))
        loss = F.softmax_cross_entropy(logits, yb)
        check_finite(float(loss.data), "training step")
        opt.zero_grad()
        backward(loss)
        opt.step()
        if schedule is not None:
            schedule.step()
        hard = yb.argmax(axis=1) if yb.ndim == 2 else yb
        tot_loss += float(loss.data) * len(idx)
        tot_correct += float((logits.data.argmax(axis=1) == hard).sum())
        n += len(idx)
    return tot_loss / n, tot_correct / n


def evaluate(net: Module, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    net.eval()
    dtype = net.classifier.weight.dtype
    tot_loss = correct = 0.0
    with no_grad():
        for idx in D.batches(len(x), batch_size):
            logits = net(Tensor(x[idx].astype(dtype)))
            tot_loss += float(F.softmax_cross_entropy(logits, y[idx]).data) * len(idx)
            correct += float((logits.data.argmax(axis=1) == y[idx]).sum())
    return tot_loss / max(len(x), 1), correct / max(len(x), 1)


def fit(net: Module, x: np.ndarray, y: np.ndarray, k: int, cfg: TrainConfig, rng: np.random.Generator,
        epochs: Optional[int] = None, log: Optional[Callable[[int, float, float], None]] = None) -> list:
    epochs = cfg.epochs if epochs is None else epochs
    hist = []
    if epochs <= 0:
        return hist
    opt = make_optimizer(net.parameters(), cfg)
    steps = epochs * -(-len(x) // cfg.batch_size)
    sched = CosineSchedule(opt, steps) if cfg.cosine else None
    for ep in range(epochs):
        loss, acc = train_epoch(net, opt, x, y, k, cfg, rng, sched)
        hist.append((loss, acc))
        if log is not None:
            log(ep, loss, acc)
    return hist


def binarize_network_weights(net: Module, packed: bool = True) -> int:
    """Switch every cell conv to binary weights (scale absorbs mean |W|); returns how many changed."""
    n = 0
    for m in net.modules():
        if isinstance(m, ConvOp) and not m.mode.binary_weights:
            m.binarize_weights()
            n += 1
    if packed:
        set_packed(net, True)
    return n


def recalibrate_bn(net: Module, x: np.ndarray, batch_size: int = 256) -> None:
    """Re-estimate BatchNorm running statistics as a cumulative average over ``x``; no parameter changes."""
    bns = [m for m in net.modules() if isinstance(m, BatchNorm2d)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.running_mean[...] = 0.0
        m.running_var[...] = 1.0
    net.train()
    dtype = net.classifier.weight.dtype
    with no_grad():
        for b, idx in enumerate(D.batches(len(x), batch_size)):
            for m in bns:
                m.momentum = 1.0 / (b + 1)
            net(Tensor(x[idx].astype(dtype)))
    for m, mom in zip(bns, saved):
        m.momentum = mom
    net.eval()


def two_phase_train_eval(net: Module, train: D.Dataset, test: D.Dataset, cfg: TrainConfig,
                         rng: np.random.Generator, log=None) -> dict:
    """Phase 1: train as built (normally real weights, binary activations). Phase 2: binarize weights, evaluate.

    Returns both accuracies and the gap in percentage points.
    """
    x, y = prepare(train, cfg.downsample)
    xt, yt = prepare(test, cfg.downsample)
    k = train.num_classes
    with default_dtype(cfg.dtype):
        fit(net, x, y, k, cfg, rng, log=log)
        _, acc1 = evaluate(net, xt, yt)
        binarize_network_weights(net)
        if cfg.recalibrate_bn:
            recalibrate_bn(net, x)
        if cfg.finetune_epochs:
            fit(net, x, y, k, cfg, rng, epochs=cfg.finetune_epochs)
        _, acc2 = evaluate(net, xt, yt)
    return {"acc_binary_act": acc1, "acc_fully_binary": acc2, "gap_points": 100.0 * (acc1 - acc2)}


def mode_of(net: Module) -> Optional[DomainMode]:
    for m in net.modules():
        if isinstance(m, ConvOp):
            return m.mode
    return None
