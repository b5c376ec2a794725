"""Discrete cells: derivation from architecture logits, JSON format and evaluation networks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cell import ArchParams, CellBase, Network, NetworkConfig, reduction_layers, softmax_np
from .nn import Linear
from .ops import CIFAR_GROUPS, IMAGENET_GROUPS, MODES, OP_ORDER, OP_TOKENS, GroupConfig, OpKind, make_op
from .tensor import Tensor, concat

Pair = tuple[str, int]
NON_ZERO_TOKENS = tuple(t for t in OP_TOKENS if t != OpKind.ZERO.token)


@dataclass(frozen=True)
class Genotype:
    """Two (op token, input state) pairs per intermediate node, for normal and reduction cells.

    Input states 0 and 1 are the cell inputs; node ``j`` (0-based) is state ``j + 2``.
    """

    normal: tuple[Pair, ...]
    reduce: tuple[Pair, ...]
    concat: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "normal", tuple((str(o), int(i)) for o, i in self.normal))
        object.__setattr__(self, "reduce", tuple((str(o), int(i)) for o, i in self.reduce))
        object.__setattr__(self, "concat", tuple(int(c) for c in self.concat))
        for name in ("normal", "reduce"):
            check_cell(getattr(self, name), name)
        if len(self.normal) != len(self.reduce):
            raise ValueError("normal and reduce cells must have the same number of nodes")
        n = self.n_nodes
        if not self.concat or any(c < 2 or c >= n + 2 for c in self.concat):
            raise ValueError(f"concat nodes must lie in [2, {n + 1}], got {list(self.concat)}")

    @property
    def n_nodes(self) -> int:
        return len(self.normal) // 2

    def cell(self, reduction: bool) -> tuple[Pair, ...]:
        return self.reduce if reduction else self.normal

    def op_fraction(self, kinds: Sequence[OpKind]) -> float:
        wanted = {k.token for k in kinds}
        ops = [o for o, _ in self.normal + self.reduce]
        return sum(o in wanted for o in ops) / len(ops)


def check_cell(pairs, name: str = "cell") -> None:
    if not pairs:
        raise ValueError(f"{name}: empty cell")
    if len(pairs) % 2:
        raise ValueError(f"{name}: need exactly 2 inputs per node, got {len(pairs)} pairs")
    for pos, (op, src) in enumerate(pairs):
        node = pos // 2 + 2
        if op not in OP_TOKENS:
            raise ValueError(f"{name}[{pos}]: unknown op token {op!r}")
        if op == OpKind.ZERO.token:
            raise ValueError(f"{name}[{pos}]: the zero op cannot appear in a genotype")
        if not 0 <= src < node:
            raise ValueError(f"{name}[{pos}]: input {src} must be an earlier state than node {node}")


def default_concat(n_nodes: int) -> tuple[int, ...]:
    return tuple(range(2, n_nodes + 2))


def _derive_cell(arch: ArchParams, reduction: bool, temperature: float) -> list[Pair]:
    probs = softmax_np(arch.alpha[reduction].data, temperature)
    cands = arch.candidates[reduction]
    zero = OpKind.ZERO.index
    pairs: list[Pair] = []
    e = 0
    for j in range(arch.n_nodes):
        scored = []
        for i in range(j + 2):
            best = None
            # candidates are stored in enumeration order, so the first max wins ties
            for p, k in zip(probs[e], cands[e]):
                if k != zero and (best is None or p > best[0]):
                    best = (p, k)
            if best is not None:
                scored.append((-best[0], i, OP_ORDER[best[1]].token))
            e += 1
        if len(scored) < 2:
            raise ValueError(f"node {j + 2} has {len(scored)} edges with non-zero ops; need 2")
        scored.sort()
        pairs += [(op, i) for _, i, op in sorted(scored[:2], key=lambda s: s[1])]
    return pairs


def derive_genotype(arch: ArchParams, temperature: Optional[float] = None,
                    reduce_temperature: Optional[float] = None) -> Genotype:
    """Keep the two strongest incoming edges per node, each with its best non-zero op.

    Edge strength is the largest non-zero-op probability under softmax(alpha / T).
    Ties go to the lower edge index, then to the earlier op in enumeration order.
    ``temperature`` overrides both cell types unless ``reduce_temperature`` is given.
    """
    t_n = arch.temperature[False] if temperature is None else temperature
    t_r = reduce_temperature if reduce_temperature is not None else (
        arch.temperature[True] if temperature is None else temperature)
    return Genotype(_derive_cell(arch, False, t_n), _derive_cell(arch, True, t_r), default_concat(arch.n_nodes))


def serialize(g: Genotype) -> str:
    doc = {"normal": [[o, i] for o, i in g.normal], "reduce": [[o, i] for o, i in g.reduce],
           "concat": list(g.concat)}
    return json.dumps(doc)


def parse(text: str) -> Genotype:
    """Parse the JSON genotype format; errors name the offending token or position."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed genotype at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ValueError("genotype must be a JSON object")
    extra = set(doc) - {"normal", "reduce", "concat"}
    if extra:
        raise ValueError(f"unknown genotype fields {sorted(extra)}")
    cells = {}
    for name in ("normal", "reduce"):
        if name not in doc:
            raise ValueError(f"genotype is missing the {name!r} field")
        raw = doc[name]
        if not isinstance(raw, list) or not raw:
            raise ValueError(f"{name}: expected a non-empty list of [op, input] pairs")
        pairs = []
        for pos, item in enumerate(raw):
            if (not isinstance(item, list) or len(item) != 2 or not isinstance(item[0], str)
                    or not isinstance(item[1], int) or isinstance(item[1], bool)):
                raise ValueError(f"{name}[{pos}]: expected [op_token, input_index], got {item!r}")
            pairs.append((item[0], item[1]))
        check_cell(pairs, name)
        cells[name] = pairs
    n_nodes = len(cells["normal"]) // 2
    concat_nodes = doc.get("concat", list(default_concat(n_nodes)))
    if not isinstance(concat_nodes, list) or not all(isinstance(c, int) for c in concat_nodes):
        raise ValueError("concat: expected a list of node indices")
    return Genotype(cells["normal"], cells["reduce"], concat_nodes)


def random_genotype(n_nodes: int, rng: np.random.Generator) -> Genotype:
    """Uniformly random valid cells: two distinct inputs per node, non-zero ops."""

    def cell():
        pairs = []
        for j in range(n_nodes):
            for src in sorted(rng.choice(j + 2, size=2, replace=False)):
                pairs.append((NON_ZERO_TOKENS[rng.integers(len(NON_ZERO_TOKENS))], int(src)))
        return pairs

    return Genotype(cell(), cell(), default_concat(n_nodes))


class EvalCell(CellBase):
    def __init__(self, genotype: Genotype, c_pp: int, c_p: int, c: int, reduction: bool, reduction_prev: bool,
                 cfg: NetworkConfig, rng: np.random.Generator) -> None:
        self.reduction = reduction
        self._setup(c_pp, c_p, c, reduction_prev, cfg, rng)
        self.pairs = genotype.cell(reduction)
        self.concat_nodes = list(genotype.concat)
        self.n_nodes = len(self.pairs) // 2
        self.ops = []
        for op, src in self.pairs:
            stride = 2 if reduction and src < 2 else 1
            self.ops.append(make_op(OpKind.from_token(op), c, stride, cfg.mode, cfg.groups, rng, cfg.activation))

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        states = [self.pre0(s0), self.pre1(s1)]
        for j in range(self.n_nodes):
            (_, a), (_, b) = self.pairs[2 * j], self.pairs[2 * j + 1]
            states.append(self.ops[2 * j](states[a]) + self.ops[2 * j + 1](states[b]))
        return concat([states[k] for k in self.concat_nodes], axis=1)

    def cost(self, shape0, shape1, name: str):
        shp0, l0 = self.pre0.cost(shape0, f"{name}.pre0")
        shp1, l1 = self.pre1.cost(shape1, f"{name}.pre1")
        shapes = [shp0, shp1]
        layers = l0 + l1
        for j in range(self.n_nodes):
            out = None
            for k in (2 * j, 2 * j + 1):
                op, src = self.pairs[k]
                out, ls = self.ops[k].cost(shapes[src], f"{name}.node{j + 2}.{op}<-{src}")
                layers += ls
            shapes.append(out)
        _, h, w = shapes[-1]
        return (self.channels * len(self.concat_nodes), h, w), layers

    def structure(self) -> tuple:
        return (self.reduction, self.channels, tuple(self.pairs), tuple(self.concat_nodes),
                tuple(type(op).__name__ for op in self.ops))


class EvalNetwork(Network):
    """Stack of discrete cells with reductions at 1/3 and 2/3 depth; no drop-path."""

    def __init__(self, genotype: Genotype, cfg: NetworkConfig, rng: Optional[np.random.Generator] = None) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        if cfg.layers < 1:
            raise ValueError("need at least one cell")
        self.cfg = cfg
        self.genotype = genotype
        c_pp, c_p, red_prev = self._build_stem(rng)
        c = cfg.init_channels
        self.cells = []
        red_at = reduction_layers(cfg.layers)
        for k in range(cfg.layers):
            reduction = k in red_at
            if reduction:
                c *= 2
            cell = EvalCell(genotype, c_pp, c_p, c, reduction, red_prev, cfg, rng)
            self.cells.append(cell)
            c_pp, c_p, red_prev = c_p, cell.out_channels, reduction
        self.classifier = Linear(c_p, cfg.num_classes, rng=rng)

    def features(self, x: Tensor) -> Tensor:
        s0, s1 = self._stem_states(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return s1

    def structure(self) -> tuple:
        return tuple(cell.structure() for cell in self.cells)


def build_eval_network(genotype: Genotype, cells: int, init_channels: int, groups: GroupConfig = CIFAR_GROUPS,
                       mode=MODES["bin-proposed"], rng: Optional[np.random.Generator] = None,
                       **cfg_kw) -> EvalNetwork:
    cfg = NetworkConfig(init_channels=init_channels, layers=cells, n_nodes=genotype.n_nodes, groups=groups,
                        mode=mode, **cfg_kw)
    return EvalNetwork(genotype, cfg, rng)


# Reference binary cells: gconv_5x5-dominated, with a real-valued path from an
# input to the output. Reconstructed from a drawing, so edges are approximate.
REFERENCE_BINARY_CELLS = Genotype(
    normal=[("gconv_5x5", 0), ("gconv_5x5", 1), ("gconv_5x5", 0), ("skip_connect", 1),
            ("gconv_5x5", 1), ("gconv_3x3", 0), ("gconv_5x5", 1), ("dil_gconv_5x5", 2)],
    reduce=[("gconv_5x5", 0), ("gconv_5x5", 1), ("max_pool_3x3", 0), ("gconv_5x5", 1),
            ("gconv_5x5", 0), ("dil_gconv_5x5", 1), ("gconv_3x3", 0), ("gconv_5x5", 1)],
    concat=[2, 3, 4, 5],
)

# Reference real-valued cells, transcribed from drawn graphs.
REFERENCE_REAL_CELLS = Genotype(
    normal=[("gconv_3x3", 0), ("gconv_5x5", 1), ("gconv_3x3", 0), ("max_pool_3x3", 1),
            ("gconv_3x3", 0), ("gconv_3x3", 1), ("gconv_5x5", 2), ("gconv_3x3", 4)],
    reduce=[("gconv_5x5", 0), ("gconv_5x5", 1), ("gconv_3x3", 0), ("dil_gconv_3x3", 1),
            ("gconv_3x3", 0), ("skip_connect", 2), ("max_pool_3x3", 0), ("dil_gconv_3x3", 4)],
    concat=[2, 3, 4, 5],
)


def reference_cifar_config(**kw) -> NetworkConfig:
    """20 cells, 36 initial channels, 12 groups of 3 channels."""
    base = dict(init_channels=36, layers=20, num_classes=10, n_nodes=4, groups=CIFAR_GROUPS,
                mode=MODES["bin-full"])
    base.update(kw)
    return NetworkConfig(**base)


def reference_imagenet_config(**kw) -> NetworkConfig:
    """14 cells, 80 initial channels, ImageNet stem with a g=4 grouped second conv."""
    base = dict(init_channels=80, layers=14, num_classes=1000, n_nodes=4, groups=IMAGENET_GROUPS,
                mode=MODES["bin-full"], stem="imagenet", binary_preprocess=True)
    base.update(kw)
    return NetworkConfig(**base)
