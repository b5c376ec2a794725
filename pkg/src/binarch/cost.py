"""Static multiply-accumulate accounting, split into real (FLOPs) and binary (BOPs) operations.

One MAC counts as one operation. BatchNorm, activations, pooling and other
elementwise work are not counted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .cell import Network, NetworkConfig
from .functional import conv_output_size
from .genotype import REFERENCE_BINARY_CELLS, EvalNetwork, Genotype, reference_cifar_config, reference_imagenet_config
from .ops import LayerCost
from .tensor import no_grad

RESNET18_TOTAL_FLOPS = 1.8e9


def count_conv(in_shape: Sequence[int], cout: int, kernel: int, stride: int = 1, padding: int = 0,
               dilation: int = 1, groups: int = 1) -> int:
    """MACs of one conv: kh*kw*(Cin/g)*Cout*Hout*Wout for a (Cin, H, W) input."""
    cin, h, w = in_shape
    if kernel < 1 or stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise ValueError("kernel, stride, dilation and groups must be positive; padding non-negative")
    if cin % groups or cout % groups:
        raise ValueError(f"groups {groups} must divide both {cin} input and {cout} output channels")
    ho = conv_output_size(h, kernel, stride, padding, dilation)
    wo = conv_output_size(w, kernel, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"{h}x{w} input too small for a {kernel}x{kernel} kernel (dilation {dilation})")
    return kernel * kernel * (cin // groups) * cout * ho * wo


@dataclass(frozen=True)
class LayerRow:
    name: str
    flops: int
    bops: int


@dataclass
class CostReport:
    per_layer: list[LayerRow] = field(default_factory=list)

    @classmethod
    def from_layers(cls, layers: Sequence[LayerCost]) -> "CostReport":
        return cls([LayerRow(l.name, 0 if l.binary else int(l.macs), int(l.macs) if l.binary else 0)
                    for l in layers])

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.per_layer)

    @property
    def bops(self) -> int:
        return sum(r.bops for r in self.per_layer)

    def layer(self, name: str) -> LayerRow:
        for r in self.per_layer:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "name", "flops", "bops"])
        for i, r in enumerate(self.per_layer):
            w.writerow([i, r.name, r.flops, r.bops])
        w.writerow(["total", "", self.flops, self.bops])
        return buf.getvalue()


def count_network(net: Network, input_shape: Sequence[int]) -> CostReport:
    """Walk every layer of a built network for one (C, H, W) input."""
    if len(input_shape) != 3:
        raise ValueError(f"input shape must be (C, H, W), got {tuple(input_shape)}")
    return CostReport.from_layers(net.cost(tuple(input_shape)))


def count_genotype(genotype: Genotype, cfg: NetworkConfig, input_shape: Sequence[int]) -> CostReport:
    with no_grad():
        return count_network(EvalNetwork(genotype, cfg), input_shape)


def resnet18_stem() -> CostReport:
    """The 7x7, 3->64, stride-2 ResNet-18 stem conv on a 224x224 input."""
    return CostReport([LayerRow("resnet18.stem.conv7x7", count_conv((3, 224, 224), 64, 7, 2, 3), 0)])


def reference_imagenet(genotype: Optional[Genotype] = None) -> CostReport:
    return count_genotype(genotype or REFERENCE_BINARY_CELLS, reference_imagenet_config(), (3, 224, 224))


def reference_cifar(genotype: Optional[Genotype] = None) -> CostReport:
    return count_genotype(genotype or REFERENCE_BINARY_CELLS, reference_cifar_config(), (3, 32, 32))


PRESETS = {
    "resnet18-stem": resnet18_stem,
    "reference-imagenet": reference_imagenet,
    "reference-cifar": reference_cifar,
}
