"""DARTS-style cells: the temperature-relaxed supernet and shared network plumbing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .binary import ScaleFactor, quant_conv2d
from .nn import BatchNorm2d, Conv2d, Linear, Module, Parameter
from .ops import (
    MODES,
    OP_ORDER,
    DESK_GROUPS,
    DomainMode,
    FactorizedReduce,
    GroupConfig,
    LayerCost,
    OpKind,
    conv_macs,
    make_op,
)
from .tensor import Tensor, concat, relu, softmax, weighted_sum


def cell_edges(n_nodes: int) -> list[tuple[int, int]]:
    """(source, target) state indices; states 0 and 1 are the cell inputs."""
    return [(i, j + 2) for j in range(n_nodes) for i in range(j + 2)]


def softmax_np(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_temperature(temperature: float) -> None:
    if not temperature > 0 or not np.isfinite(temperature):
        raise ValueError(f"temperature must be a positive finite number, got {temperature}")


def mixing_weights(alpha: Tensor, temperature: float) -> Tensor:
    """softmax(alpha / T) along the last axis."""
    check_temperature(temperature)
    return softmax(alpha * (1.0 / temperature), axis=-1)


def mixed_edge_forward(x: Tensor, ops: Sequence[Module], alpha_edge, temperature: float) -> Tensor:
    """Temperature-weighted sum of every candidate op applied to ``x``."""
    check_temperature(temperature)
    alpha_edge = alpha_edge if isinstance(alpha_edge, Tensor) else Tensor(np.asarray(alpha_edge, dtype=float))
    if alpha_edge.ndim != 1 or alpha_edge.shape[0] != len(ops) or not ops:
        raise ValueError(f"need one logit per op: {alpha_edge.shape} for {len(ops)} ops")
    return weighted_sum([op(x) for op in ops], mixing_weights(alpha_edge, temperature))


def arch_entropy(alpha, temperature: float) -> np.ndarray:
    """Shannon entropy (nats) of softmax(alpha / T) per edge."""
    check_temperature(temperature)
    a = np.atleast_2d(alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha, dtype=float))
    p = softmax_np(a, temperature)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


class ArchParams:
    """Per-edge logits over each edge's candidate ops, one table per cell type.

    ``candidates_*`` is an [edges, k] array of OpKind indices (in enumeration
    order within every row); ``alpha_*`` holds the matching logits.
    """

    def __init__(self, n_nodes: int, candidates_normal: np.ndarray, candidates_reduce: np.ndarray,
                 alpha_normal: np.ndarray, alpha_reduce: np.ndarray, t_normal: float = 0.2,
                 t_reduce: float = 0.15) -> None:
        check_temperature(t_normal)
        check_temperature(t_reduce)
        self.n_nodes = n_nodes
        self.edges = cell_edges(n_nodes)
        self.candidates = {False: np.asarray(candidates_normal, dtype=np.int64),
                           True: np.asarray(candidates_reduce, dtype=np.int64)}
        self.alpha = {False: Parameter(alpha_normal), True: Parameter(alpha_reduce)}
        self.temperature = {False: float(t_normal), True: float(t_reduce)}
        for red in (False, True):
            if self.alpha[red].shape != self.candidates[red].shape:
                raise ValueError("alpha and candidate tables differ in shape")
            if self.candidates[red].shape[0] != len(self.edges):
                raise ValueError(f"expected {len(self.edges)} edges, got {self.candidates[red].shape[0]}")
            if not np.all(np.isfinite(self.alpha[red].data)):
                raise ValueError("architecture logits must be finite")

    @classmethod
    def initial(cls, n_nodes: int = 4, rng: Optional[np.random.Generator] = None, noise: float = 1e-3,
                t_normal: float = 0.2, t_reduce: float = 0.15, ops: Sequence[OpKind] = OP_ORDER) -> "ArchParams":
        """Near-zero logits with uniform noise in [-noise, noise] over the given ops."""
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.array(sorted(OpKind(o).index for o in ops), dtype=np.int64)
        n_edges = len(cell_edges(n_nodes))
        cands = np.tile(idx, (n_edges, 1))
        a_n = rng.uniform(-noise, noise, cands.shape)
        a_r = rng.uniform(-noise, noise, cands.shape)
        return cls(n_nodes, cands, cands.copy(), a_n, a_r, t_normal, t_reduce)

    @property
    def alpha_normal(self) -> Parameter:
        return self.alpha[False]

    @property
    def alpha_reduce(self) -> Parameter:
        return self.alpha[True]

    def parameters(self) -> list[Parameter]:
        return [self.alpha[False], self.alpha[True]]

    def ops_per_edge(self) -> int:
        return self.candidates[False].shape[1]

    def kinds(self, reduction: bool, edge: int) -> list[OpKind]:
        return [OP_ORDER[i] for i in self.candidates[reduction][edge]]

    def weights(self, reduction: bool) -> Tensor:
        return mixing_weights(self.alpha[reduction], self.temperature[reduction])

    def probabilities(self, reduction: bool, temperature: Optional[float] = None) -> np.ndarray:
        t = self.temperature[reduction] if temperature is None else temperature
        return softmax_np(self.alpha[reduction].data, t)

    def op_probability(self, kinds: Sequence[OpKind], reduction: bool = False) -> float:
        """Mean per-edge probability mass on ``kinds``."""
        p = self.probabilities(reduction)
        wanted = {k.index for k in kinds}
        mask = np.isin(self.candidates[reduction], list(wanted))
        return float((p * mask).sum(axis=1).mean())

    def copy(self) -> "ArchParams":
        return ArchParams(self.n_nodes, self.candidates[False].copy(), self.candidates[True].copy(),
                          self.alpha[False].data.copy(), self.alpha[True].data.copy(),
                          self.temperature[False], self.temperature[True])

    def to_dict(self) -> dict:
        out = {"n_nodes": self.n_nodes, "t_normal": self.temperature[False], "t_reduce": self.temperature[True]}
        for red, key in ((False, "normal"), (True, "reduce")):
            out[f"{key}_ops"] = [[OP_ORDER[i].token for i in row] for row in self.candidates[red]]
            out[f"{key}_alpha"] = self.alpha[red].data.tolist()
        return out


@dataclass
class NetworkConfig:
    """Layout knobs shared by the search supernet and evaluation networks."""

    init_channels: int = 12
    layers: int = 5
    num_classes: int = 10
    n_nodes: int = 4
    stem_multiplier: int = 3
    stem: str = "cifar"  # "cifar" or "imagenet"
    stem_stride: int = 1
    imagenet_stem_groups: int = 4
    groups: GroupConfig = field(default_factory=lambda: DESK_GROUPS)
    mode: DomainMode = field(default_factory=lambda: MODES["bin-proposed"])
    activation: str = "prelu"
    binary_preprocess: bool = False

    def with_(self, **kw) -> "NetworkConfig":
        return replace(self, **kw)


def reduction_layers(layers: int) -> tuple[int, ...]:
    return tuple(sorted({layers // 3, 2 * layers // 3}))


class Preprocess(Module):
    """1x1 channel adapter between cells: ReLU-Conv-BN, or BN-Sign-Conv when binary."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, binary: bool = False) -> None:
        self.cin, self.cout, self.binary = cin, cout, binary
        self.conv = Conv2d(cin, cout, 1, rng=rng)
        self.bn = BatchNorm2d(cout)
        if binary:
            self.bn_in = BatchNorm2d(cin)
            self.alpha = ScaleFactor(cout, np.abs(self.conv.weight.data).reshape(cout, -1).mean(axis=1))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"preprocess expects {self.cin} channels, got {x.shape[1]}")
        if self.binary:
            y = quant_conv2d(self.bn_in(x), self.conv.weight, self.alpha, binary_weights=True, binary_acts=True)
        else:
            y = self.conv(relu(x))
        return self.bn(y)

    def cost(self, shape, name: str = "preprocess"):
        c, h, w = shape
        return (self.cout, h, w), [LayerCost(name, conv_macs(1, c, self.cout, 1, h, w), self.binary)]


class BinaryFactorizedReduce(FactorizedReduce):
    """Factorized reduce whose two 1x1 convs are binary."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator) -> None:
        super().__init__(cin, cout, rng)
        self.bn_in = BatchNorm2d(cin)
        self.alpha1 = ScaleFactor(cout // 2, np.abs(self.conv1.weight.data).reshape(cout // 2, -1).mean(axis=1))
        self.alpha2 = ScaleFactor(cout // 2, np.abs(self.conv2.weight.data).reshape(cout // 2, -1).mean(axis=1))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"factorized reduce needs even spatial size, got {x.shape[2:]}")
        h = self.bn_in(x)
        a = quant_conv2d(h, self.conv1.weight, self.alpha1, binary_weights=True, binary_acts=True, stride=2)
        b = quant_conv2d(h[:, :, 1:, 1:], self.conv2.weight, self.alpha2, binary_weights=True,
                         binary_acts=True, stride=2)
        return self.bn(concat([a, b], axis=1))

    def cost(self, shape, name: str = "factorized_reduce"):
        out, layers = super().cost(shape, name)
        return out, [LayerCost(l.name, l.macs, True) for l in layers]


def make_preprocess0(cin: int, cout: int, reduction_prev: bool, rng, binary: bool) -> Module:
    if reduction_prev:
        return BinaryFactorizedReduce(cin, cout, rng) if binary else FactorizedReduce(cin, cout, rng)
    return Preprocess(cin, cout, rng, binary)


class CifarStem(Module):
    def __init__(self, cout: int, rng: np.random.Generator, stride: int = 1) -> None:
        self.conv = Conv2d(3, cout, 3, stride=stride, padding=1, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.cout = cout

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))

    def cost(self, shape):
        c, h, w = shape
        s = self.conv.stride
        ho, wo = F.conv_output_size(h, 3, s, 1), F.conv_output_size(w, 3, s, 1)
        return (self.cout, ho, wo), [LayerCost("stem.conv", conv_macs(3, c, self.cout, 1, ho, wo), False)]


class ImageNetStem(Module):
    """Two stride-2 stages: 3x3 conv to C/2, grouped 3x3 conv to C, then another stride-2 3x3 conv."""

    def __init__(self, channels: int, rng: np.random.Generator, groups: int = 4) -> None:
        self.channels = channels
        self.conv0 = Conv2d(3, channels // 2, 3, stride=2, padding=1, rng=rng)
        self.bn0 = BatchNorm2d(channels // 2)
        self.conv1 = Conv2d(channels // 2, channels, 3, stride=2, padding=1, groups=groups, rng=rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, stride=2, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor):
        s0 = self.bn1(self.conv1(relu(self.bn0(self.conv0(x)))))
        s1 = self.bn2(self.conv2(relu(s0)))
        return s0, s1

    def cost(self, shape):
        c, h, w = shape
        layers = []
        for name, conv in (("stem.conv0", self.conv0), ("stem.conv1", self.conv1), ("stem.conv2", self.conv2)):
            h, w = F.conv_output_size(h, 3, 2, 1), F.conv_output_size(w, 3, 2, 1)
            layers.append(LayerCost(name, conv_macs(3, conv.cin, conv.cout, conv.groups, h, w), False))
            if name == "stem.conv1":
                s0 = (conv.cout, h, w)
        return (s0, (self.channels, h, w)), layers


class MixedEdge(Module):
    def __init__(self, kinds: Sequence[OpKind], channels: int, stride: int, cfg: NetworkConfig,
                 rng: np.random.Generator) -> None:
        self.kinds = list(kinds)
        self.stride = stride
        self.ops = [make_op(k, channels, stride, cfg.mode, cfg.groups, rng, cfg.activation) for k in kinds]

    def forward(self, x: Tensor, weights: Tensor) -> Tensor:
        return weighted_sum([op(x) for op in self.ops], weights)

    def cost(self, shape, name: str):
        layers, out = [], None
        for kind, op in zip(self.kinds, self.ops):
            out, ls = op.cost(shape, f"{name}.{kind.token}")
            layers += ls
        return out, layers


class CellBase(Module):
    """Shared preprocessing and node bookkeeping for search and evaluation cells."""

    reduction: bool

    def _setup(self, c_pp: int, c_p: int, c: int, reduction_prev: bool, cfg: NetworkConfig, rng) -> None:
        self.channels = c
        self.reduction_prev = reduction_prev
        self.pre0 = make_preprocess0(c_pp, c, reduction_prev, rng, cfg.binary_preprocess)
        self.pre1 = Preprocess(c_p, c, rng, cfg.binary_preprocess)

    @property
    def out_channels(self) -> int:
        return self.channels * len(self.concat_nodes)


class SearchCell(CellBase):
    def __init__(self, arch: ArchParams, c_pp: int, c_p: int, c: int, reduction: bool, reduction_prev: bool,
                 cfg: NetworkConfig, rng: np.random.Generator) -> None:
        self.reduction = reduction
        self._setup(c_pp, c_p, c, reduction_prev, cfg, rng)
        self.n_nodes = arch.n_nodes
        self.edges_idx = arch.edges
        self.concat_nodes = list(range(2, arch.n_nodes + 2))
        self.edges = []
        for e, (src, _) in enumerate(arch.edges):
            stride = 2 if reduction and src < 2 else 1
            self.edges.append(MixedEdge(arch.kinds(reduction, e), c, stride, cfg, rng))

    def forward(self, s0: Tensor, s1: Tensor, weights: Tensor) -> Tensor:
        states = [self.pre0(s0), self.pre1(s1)]
        e = 0
        for j in range(self.n_nodes):
            total = None
            for i in range(j + 2):
                h = self.edges[e](states[i], weights[e])
                total = h if total is None else total + h
                e += 1
            states.append(total)
        return concat([states[k] for k in self.concat_nodes], axis=1)

    def cost(self, shape0, shape1, name: str):
        shp0, l0 = self.pre0.cost(shape0, f"{name}.pre0")
        shp1, l1 = self.pre1.cost(shape1, f"{name}.pre1")
        shapes = [shp0, shp1]
        layers = l0 + l1
        e = 0
        for j in range(self.n_nodes):
            out = None
            for i in range(j + 2):
                out, ls = self.edges[e].cost(shapes[i], f"{name}.edge{i}->{j + 2}")
                layers += ls
                e += 1
            shapes.append(out)
        c, h, w = shapes[-1]
        return (self.channels * len(self.concat_nodes), h, w), layers


class Network(Module):
    """Stem, stacked cells, global pooling and a real-valued linear classifier."""

    cfg: NetworkConfig

    def _build_stem(self, rng):
        cfg = self.cfg
        if cfg.stem == "imagenet":
            self.stem = ImageNetStem(cfg.init_channels, rng, cfg.imagenet_stem_groups)
            return cfg.init_channels, cfg.init_channels, True
        c_stem = cfg.stem_multiplier * cfg.init_channels
        self.stem = CifarStem(c_stem, rng, cfg.stem_stride)
        return c_stem, c_stem, False

    def _stem_states(self, x: Tensor):
        if self.cfg.stem == "imagenet":
            return self.stem(x)
        s = self.stem(x)
        return s, s

    def features(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(F.global_avg_pool(self.features(x)))

    def cost(self, input_shape) -> list[LayerCost]:
        """Static per-layer MAC counts for one input of shape (C, H, W)."""
        shp, layers = self.stem.cost(tuple(input_shape))
        s0, s1 = shp if self.cfg.stem == "imagenet" else (shp, shp)
        for k, cell in enumerate(self.cells):
            out, ls = cell.cost(s0, s1, f"cell{k}")
            layers += ls
            s0, s1 = s1, out
        layers.append(LayerCost("classifier", self.classifier.fin * self.classifier.fout, False))
        return layers


class SearchNetwork(Network):
    """Supernet whose every edge mixes all candidate ops by softmax(alpha / T)."""

    def __init__(self, cfg: NetworkConfig, arch: ArchParams, rng: Optional[np.random.Generator] = None) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        if cfg.n_nodes != arch.n_nodes:
            raise ValueError(f"config has {cfg.n_nodes} nodes but arch has {arch.n_nodes}")
        self.cfg = cfg
        self.arch = arch
        c_pp, c_p, red_prev = self._build_stem(rng)
        c = cfg.init_channels
        self.cells = []
        red_at = reduction_layers(cfg.layers)
        for k in range(cfg.layers):
            reduction = k in red_at
            if reduction:
                c *= 2
            cell = SearchCell(arch, c_pp, c_p, c, reduction, red_prev, cfg, rng)
            self.cells.append(cell)
            c_pp, c_p, red_prev = c_p, cell.out_channels, reduction
        self.classifier = Linear(c_p, cfg.num_classes, rng=rng)

    def features(self, x: Tensor) -> Tensor:
        w_normal = self.arch.weights(False)
        w_reduce = self.arch.weights(True)
        s0, s1 = self._stem_states(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, w_reduce if cell.reduction else w_normal)
        return s1

    def weight_parameters(self) -> list[Parameter]:
        return self.parameters()
