"""First-order bilevel search with progressive depth increase and op pruning."""

from __future__ import annotations

import contextlib
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import data as D
from . import functional as F
from .cell import ArchParams, NetworkConfig, SearchNetwork, arch_entropy, check_temperature
from .genotype import Genotype, derive_genotype
from .nn import Parameter
from .ops import MODES, OP_ORDER, DomainMode, OpKind
from .optim import SGD, Adam, Optimizer
from .tensor import Tensor, backward, default_dtype, no_grad

METRIC_COLUMNS = ("epoch", "stage", "split", "loss", "acc", "mean_edge_entropy", "skip_prob", "conv5_prob")
CONV5 = (OpKind.GCONV5, OpKind.DIL_GCONV5)


@dataclass(frozen=True)
class Stage:
    depth: int
    ops_kept: int
    epochs: int
    warmup_epochs: int


@dataclass(frozen=True)
class SearchSchedule:
    stages: tuple[Stage, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(s if isinstance(s, Stage) else Stage(**s) for s in self.stages))
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.ops_kept > a.ops_kept:
                raise ValueError("ops_kept must be non-increasing across stages")
            if b.depth < a.depth:
                raise ValueError("depth must be non-decreasing across stages")
        for s in self.stages:
            if s.depth < 1 or s.ops_kept < 1 or s.epochs < 0 or s.warmup_epochs < 0:
                raise ValueError(f"invalid stage {s}")
            if s.epochs and s.warmup_epochs >= s.epochs:
                raise ValueError(f"warmup ({s.warmup_epochs}) must be shorter than the stage ({s.epochs} epochs)")
            if s.ops_kept > len(OP_ORDER):
                raise ValueError(f"cannot keep {s.ops_kept} of {len(OP_ORDER)} ops")

    @classmethod
    def full(cls) -> "SearchSchedule":
        return cls(tuple(Stage(d, k, 25, 10) for d, k in ((5, 8), (11, 5), (17, 3))))

    @classmethod
    def uniform(cls, depths: Sequence[int], ops: Sequence[int], epochs: int, warmup: int) -> "SearchSchedule":
        return cls(tuple(Stage(d, k, epochs, warmup) for d, k in zip(depths, ops)))


@dataclass(frozen=True)
class OptimConfig:
    arch_lr: float = 6e-4
    arch_weight_decay: float = 1e-3
    arch_betas: tuple = (0.5, 0.999)
    weight_optimizer: str = "adam"
    weight_lr: float = 1e-3
    weight_decay: float = 3e-4
    weight_betas: tuple = (0.9, 0.999)
    weight_momentum: float = 0.9
    batch_size: int = 96
    t_normal: float = 0.2
    t_reduce: float = 0.15

    def __post_init__(self) -> None:
        check_temperature(self.t_normal)
        check_temperature(self.t_reduce)
        for name in ("arch_lr", "weight_lr", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def weight_opt(self, params) -> Optimizer:
        if self.weight_optimizer == "sgd":
            return SGD(params, self.weight_lr, self.weight_momentum, self.weight_decay)
        return Adam(params, self.weight_lr, self.weight_betas, self.weight_decay)

    def arch_opt(self, params) -> Optimizer:
        return Adam(params, self.arch_lr, self.arch_betas, self.arch_weight_decay)


@dataclass
class SearchConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    schedule: SearchSchedule = field(default_factory=SearchSchedule.full)
    optim: OptimConfig = field(default_factory=OptimConfig)
    split_fraction: float = 0.5
    downsample: int = 1
    pad_crop: int = 4
    flip: bool = True
    dtype: str = "float32"
    alpha_noise: float = 1e-3


class SearchDiverged(RuntimeError):
    def __init__(self, stage: int, epoch: int, step: int, value: float) -> None:
        super().__init__(f"search diverged at stage {stage}, epoch {epoch}, step {step}: loss {value}")
        self.stage, self.epoch, self.step, self.value = stage, epoch, step, value


@dataclass
class SearchResult:
    genotype: Genotype
    arch: ArchParams
    metrics: list[dict]
    stage_archs: list[ArchParams]

    def final(self, split: str) -> dict:
        rows = [r for r in self.metrics if r["split"] == split]
        return rows[-1] if rows else {}


@contextlib.contextmanager
def frozen(params: Sequence[Parameter]) -> Iterator[None]:
    """Stop gradient computation for ``params`` inside the block."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def _loss(net: SearchNetwork, batch) -> tuple[Tensor, float]:
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    logits = net(Tensor(np.asarray(x, dtype=net.classifier.weight.dtype)))
    loss = F.softmax_cross_entropy(logits, y)
    return loss, float((logits.data.argmax(axis=1) == np.asarray(y)).mean())


def bilevel_step(net: SearchNetwork, arch: ArchParams, w_opt: Optimizer, a_opt: Optional[Optimizer],
                 batch_w, batch_a, update_arch: bool = True) -> dict:
    """One weight update on ``batch_w`` (alpha frozen), then one alpha update on ``batch_a`` (weights frozen)."""
    if len(batch_w[0]) == 0 or (update_arch and len(batch_a[0]) == 0):
        raise ValueError("empty batch")
    net.train()
    out = {}
    with frozen(arch.parameters()):
        loss, acc = _loss(net, batch_w)
        w_opt.zero_grad()
        backward(loss)
        out["loss_w"], out["acc_w"] = float(loss.data), acc
        if math.isfinite(out["loss_w"]):
            w_opt.step()
    if update_arch and a_opt is not None and math.isfinite(out["loss_w"]):
        with frozen(w_opt.params):
            loss, acc = _loss(net, batch_a)
            a_opt.zero_grad()
            backward(loss)
            out["loss_a"], out["acc_a"] = float(loss.data), acc
            if math.isfinite(out["loss_a"]):
                a_opt.step()
    return out


def prune_arch(arch: ArchParams, ops_kept: int) -> ArchParams:
    """Keep the ``ops_kept`` highest logits per edge; ties go to the earlier op in enumeration order."""
    if ops_kept > arch.ops_per_edge():
        raise ValueError(f"cannot keep {ops_kept} ops on edges that hold {arch.ops_per_edge()}")
    if ops_kept < 1:
        raise ValueError("must keep at least one op")
    cands, alphas = {}, {}
    for red in (False, True):
        c_old, a_old = arch.candidates[red], arch.alpha[red].data
        rows_c, rows_a = [], []
        for c_row, a_row in zip(c_old, a_old):
            order = sorted(range(len(c_row)), key=lambda i: (-a_row[i], c_row[i]))[:ops_kept]
            keep = sorted(order, key=lambda i: c_row[i])
            rows_c.append(c_row[keep])
            rows_a.append(a_row[keep])
        cands[red], alphas[red] = np.array(rows_c), np.array(rows_a)
    return ArchParams(arch.n_nodes, cands[False], cands[True], alphas[False], alphas[True],
                      arch.temperature[False], arch.temperature[True])


def stage_transition(arch: ArchParams, schedule: SearchSchedule, stage_index: int, net_cfg: NetworkConfig,
                     rng: np.random.Generator) -> tuple[ArchParams, SearchNetwork]:
    """Prune ``arch`` to the op budget of ``stage_index`` and build a fresh supernet at that depth."""
    if not 0 <= stage_index < len(schedule.stages):
        raise IndexError(f"stage {stage_index} out of range for {len(schedule.stages)} stages")
    st = schedule.stages[stage_index]
    new_arch = prune_arch(arch, st.ops_kept)
    return new_arch, SearchNetwork(net_cfg.with_(layers=st.depth), new_arch, rng)


def arch_metrics(arch: ArchParams) -> dict:
    ent = np.concatenate([arch_entropy(arch.alpha[r].data, arch.temperature[r]) for r in (False, True)])
    return {"mean_edge_entropy": float(ent.mean()),
            "skip_prob": arch.op_probability([OpKind.IDENTITY], False),
            "conv5_prob": arch.op_probability(CONV5, False)}


def _fmt(v) -> str:
    return repr(round(v, 10)) if isinstance(v, float) else str(v)


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def _evaluate(net: SearchNetwork, x: np.ndarray, y: np.ndarray, batch_size: int) -> tuple[float, float]:
    net.eval()
    tot = correct = 0.0
    with no_grad():
        for idx in D.batches(len(x), batch_size):
            logits = net(Tensor(x[idx].astype(net.classifier.weight.dtype)))
            tot += float(F.softmax_cross_entropy(logits, y[idx]).data) * len(idx)
            correct += float((logits.data.argmax(axis=1) == y[idx]).sum())
    return tot / len(x), correct / len(x)


def run_search(cfg: SearchConfig, dataset: D.Dataset, mode: Optional[DomainMode] = None, seed: int = 0,
               log: Optional[Callable[[dict], None]] = None) -> SearchResult:
    """Run every stage of the schedule and derive the final genotype.

    Raises ``SearchDiverged`` on a non-finite loss.
    """
    mode = cfg.network.mode if mode is None else mode
    net_cfg = cfg.network.with_(mode=mode, num_classes=dataset.num_classes)
    rng = np.random.default_rng(seed)
    part_w, part_a = D.split(dataset, cfg.split_fraction, seed)
    xw, yw = D.downsample(part_w.normalized(), cfg.downsample), part_w.labels
    xa, ya = D.downsample(part_a.normalized(), cfg.downsample), part_a.labels
    policy = D.AugmentPolicy(cfg.pad_crop, cfg.flip, 0, 0.0)
    bs = cfg.optim.batch_size
    rows: list[dict] = []
    stage_archs = []
    epoch_global = 0
    with default_dtype(cfg.dtype):
        arch = ArchParams.initial(net_cfg.n_nodes, rng, cfg.alpha_noise, cfg.optim.t_normal, cfg.optim.t_reduce)
        for s, st in enumerate(cfg.schedule.stages):
            arch, net = stage_transition(arch, cfg.schedule, s, net_cfg, rng)
            w_opt = cfg.optim.weight_opt(net.parameters())
            a_opt = cfg.optim.arch_opt(arch.parameters())
            for ep in range(st.epochs):
                update_arch = ep >= st.warmup_epochs
                bw = D.batches(len(xw), bs, rng)
                ba = D.batches(len(xa), bs, rng)
                lw = aw = 0.0
                n = 0
                for step, (iw, ia) in enumerate(zip(bw, ba)):
                    xb, yb = D.augment(xw[iw], yw[iw], dataset.num_classes, policy, rng)
                    xab, yab = D.augment(xa[ia], ya[ia], dataset.num_classes, policy, rng)
                    out = bilevel_step(net, arch, w_opt, a_opt, (xb, yb), (xab, yab), update_arch)
                    for key in ("loss_w", "loss_a"):
                        if key in out and not math.isfinite(out[key]):
                            raise SearchDiverged(s, ep, step, out[key])
                    lw += out["loss_w"] * len(iw)
                    aw += out["acc_w"] * len(iw)
                    n += len(iw)
                vl, va = _evaluate(net, xa, ya, 256)
                if not math.isfinite(vl):
                    raise SearchDiverged(s, ep, -1, vl)
                am = arch_metrics(arch)
                for split_name, loss, acc in (("train", lw / n, aw / n), ("val", vl, va)):
                    row = {"epoch": epoch_global, "stage": s, "split": split_name, "loss": loss, "acc": acc, **am}
                    rows.append(row)
                    if log is not None:
                        log(row)
                epoch_global += 1
            stage_archs.append(arch.copy())
    return SearchResult(derive_genotype(arch), arch, rows, stage_archs)
