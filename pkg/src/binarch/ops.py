"""Candidate cell operations for the binary search space.

Eight operations: grouped 3x3/5x5 convolutions, dilated grouped 3x3/5x5
convolutions, identity, 3x3 max/average pooling and the zero op. Every
convolutional op has depth one (a single convolution) laid out as
BatchNorm -> Sign -> Conv -> Activation, and adds its input back when the
stride is 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .binary import ScaleFactor, quant_conv2d
from .nn import BatchNorm2d, Conv2d, Identity, Module, Parameter, PReLU, ReLU, kaiming_uniform
from .tensor import Tensor, concat, relu


class OpKind(enum.Enum):
    GCONV3 = "gconv_3x3"
    GCONV5 = "gconv_5x5"
    DIL_GCONV3 = "dil_gconv_3x3"
    DIL_GCONV5 = "dil_gconv_5x5"
    IDENTITY = "skip_connect"
    MAX_POOL3 = "max_pool_3x3"
    AVG_POOL3 = "avg_pool_3x3"
    ZERO = "zero"

    @property
    def token(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return OP_ORDER.index(self)

    @property
    def is_conv(self) -> bool:
        return self in CONV_GEOMETRY

    @classmethod
    def from_token(cls, token: str) -> "OpKind":
        try:
            return cls(token)
        except ValueError:
            raise ValueError(f"unknown op token {token!r}") from None


OP_ORDER: tuple[OpKind, ...] = tuple(OpKind)
OP_TOKENS: tuple[str, ...] = tuple(k.value for k in OP_ORDER)

# kind -> (kernel, dilation)
CONV_GEOMETRY = {
    OpKind.GCONV3: (3, 1),
    OpKind.GCONV5: (5, 1),
    OpKind.DIL_GCONV3: (3, 2),
    OpKind.DIL_GCONV5: (5, 2),
}


@dataclass(frozen=True)
class DomainMode:
    """Whether convolution weights and/or activations are binarized."""

    binary_weights: bool
    binary_acts: bool

    @property
    def name(self) -> str:
        for name, mode in MODES.items():
            if mode == self:
                return name
        raise KeyError(self)

    @classmethod
    def from_name(cls, name: str) -> "DomainMode":
        try:
            return MODES[name]
        except KeyError:
            raise ValueError(f"unknown mode {name!r}; choose from {sorted(MODES)}") from None


MODES = {
    "real": DomainMode(False, False),
    "bin-full": DomainMode(True, True),
    "bin-w-real-a": DomainMode(True, False),
    "bin-proposed": DomainMode(False, True),
}


@dataclass(frozen=True)
class GroupConfig:
    """Grouped-convolution geometry: channels per group is fixed, groups scale with width."""

    channels_per_group: int = 3

    def groups_for(self, channels: int) -> int:
        cpg = self.channels_per_group
        if cpg < 2:
            raise ValueError("channels_per_group must be >= 2; one channel per group is a depthwise conv")
        if channels % cpg:
            raise ValueError(f"{channels} channels not divisible into groups of {cpg}")
        groups = channels // cpg
        if groups == channels:
            raise ValueError("depthwise convolution is not allowed in the search space")
        return groups


DESK_GROUPS = GroupConfig(channels_per_group=3)  # 12 channels = 4 groups of 3
CIFAR_GROUPS = GroupConfig(channels_per_group=3)  # 36 channels = 12 groups of 3
IMAGENET_GROUPS = GroupConfig(channels_per_group=5)  # 80 channels = 16 groups of 5


@dataclass
class LayerCost:
    name: str
    macs: int
    binary: bool


def conv_macs(kernel: int, cin: int, cout: int, groups: int, hout: int, wout: int) -> int:
    return kernel * kernel * (cin // groups) * cout * hout * wout


def make_activation(kind: str, channels: int) -> Module:
    if kind == "prelu":
        return PReLU(channels, 0.25)
    if kind == "relu":
        return ReLU()
    if kind == "identity":
        return Identity()
    raise ValueError(f"unknown activation {kind!r}")


class ConvOp(Module):
    """Grouped (optionally dilated) convolution block with an identity shortcut."""

    def __init__(self, kind: OpKind, channels: int, stride: int, mode: DomainMode, groups: GroupConfig,
                 rng: np.random.Generator, activation: str = "prelu", pre_bn: bool = True) -> None:
        self.kind = kind
        self.kernel, self.dilation = CONV_GEOMETRY[kind]
        self.channels = channels
        self.stride = stride
        self.groups = groups.groups_for(channels)
        self.padding = self.dilation * (self.kernel - 1) // 2
        self.mode = mode
        self.packed = False
        self.bn = BatchNorm2d(channels) if pre_bn else None
        fan_in = channels // self.groups * self.kernel ** 2
        w = kaiming_uniform(rng, (channels, channels // self.groups, self.kernel, self.kernel), fan_in)
        self.weight = Parameter(w)
        init = np.abs(w).reshape(channels, -1).mean(axis=1) if mode.binary_weights else 1.0
        self.alpha = ScaleFactor(channels, init)
        self.act = make_activation(activation, channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.kind.token} expects {self.channels} channels, got {x.shape[1]}")
        h = self.bn(x) if self.bn is not None else x
        y = quant_conv2d(h, self.weight, self.alpha, binary_weights=self.mode.binary_weights,
                         binary_acts=self.mode.binary_acts, groups=self.groups, dilation=self.dilation,
                         stride=self.stride, padding=self.padding, packed=self.packed)
        y = self.act(y)
        if self.stride == 1:
            y = y + x
        return y

    def binarize_weights(self) -> None:
        """Switch to binary weights, folding mean |W| per channel into the scale."""
        if self.mode.binary_weights:
            return
        mag = np.abs(self.weight.data).reshape(self.channels, -1).mean(axis=1)
        self.alpha.raw.data[...] = self.alpha.effective() * mag
        self.mode = DomainMode(True, self.mode.binary_acts)

    def cost(self, shape, name: str = ""):
        c, h, w = shape
        ho = F.conv_output_size(h, self.kernel, self.stride, self.padding, self.dilation)
        wo = F.conv_output_size(w, self.kernel, self.stride, self.padding, self.dilation)
        macs = conv_macs(self.kernel, c, self.channels, self.groups, ho, wo)
        binary = self.mode.binary_weights and self.mode.binary_acts
        return (self.channels, ho, wo), [LayerCost(name or self.kind.token, macs, binary)]


class PoolOp(Module):
    """3x3 max or average pooling followed by a non-affine BatchNorm."""

    def __init__(self, kind: OpKind, channels: int, stride: int) -> None:
        self.kind = kind
        self.channels = channels
        self.stride = stride
        self.bn = BatchNorm2d(channels, affine=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.kind.token} expects {self.channels} channels, got {x.shape[1]}")
        pool = F.max_pool2d if self.kind is OpKind.MAX_POOL3 else F.avg_pool2d
        return self.bn(pool(x, 3, self.stride, 1))

    def cost(self, shape, name: str = ""):
        c, h, w = shape
        return (c, F.conv_output_size(h, 3, self.stride, 1), F.conv_output_size(w, 3, self.stride, 1)), []


class ZeroOp(Module):
    def __init__(self, channels: int, stride: int) -> None:
        self.kind = OpKind.ZERO
        self.channels = channels
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"zero op expects {self.channels} channels, got {x.shape[1]}")
        return F.pad_zero_like(x, self.stride)

    def cost(self, shape, name: str = ""):
        c, h, w = shape
        s = self.stride
        return (c, (h + s - 1) // s, (w + s - 1) // s), []


class FactorizedReduce(Module):
    """Halve resolution with two offset stride-2 1x1 convs, concatenated (real-valued)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator) -> None:
        if cout % 2:
            raise ValueError(f"factorized reduce needs an even output width, got {cout}")
        self.cin, self.cout = cin, cout
        self.conv1 = Conv2d(cin, cout // 2, 1, stride=2, rng=rng)
        self.conv2 = Conv2d(cin, cout // 2, 1, stride=2, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"factorized reduce needs even spatial size, got {x.shape[2:]}")
        h = relu(x)
        return self.bn(concat([self.conv1(h), self.conv2(h[:, :, 1:, 1:])], axis=1))

    def cost(self, shape, name: str = "factorized_reduce"):
        c, h, w = shape
        ho, wo = h // 2, w // 2
        per = conv_macs(1, c, self.cout // 2, 1, ho, wo)
        return (self.cout, ho, wo), [LayerCost(f"{name}.conv1", per, False), LayerCost(f"{name}.conv2", per, False)]


class IdentityOp(Module):
    def __init__(self, channels: int) -> None:
        self.kind = OpKind.IDENTITY
        self.channels = channels
        self.stride = 1

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"skip_connect expects {self.channels} channels, got {x.shape[1]}")
        return x

    def cost(self, shape, name: str = ""):
        return tuple(shape), []


class ReducingIdentity(FactorizedReduce):
    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        super().__init__(channels, channels, rng)
        self.kind = OpKind.IDENTITY
        self.channels = channels
        self.stride = 2


def make_op(kind: OpKind, channels: int, stride: int = 1, mode: DomainMode = MODES["bin-proposed"],
            groups: GroupConfig = DESK_GROUPS, rng: Optional[np.random.Generator] = None,
            activation: str = "prelu", pre_bn: bool = True) -> Module:
    """Build one candidate operation acting on ``channels`` feature maps."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    rng = rng if rng is not None else np.random.default_rng(0)
    kind = OpKind(kind) if not isinstance(kind, OpKind) else kind
    if kind.is_conv:
        return ConvOp(kind, channels, stride, mode, groups, rng, activation, pre_bn)
    if kind in (OpKind.MAX_POOL3, OpKind.AVG_POOL3):
        return PoolOp(kind, channels, stride)
    if kind is OpKind.IDENTITY:
        return IdentityOp(channels) if stride == 1 else ReducingIdentity(channels, rng)
    return ZeroOp(channels, stride)


def expected_shape(kind: OpKind, shape, stride: int) -> tuple[int, ...]:
    """Closed-form output shape of a candidate op on an NCHW input."""
    n, c, h, w = shape
    if stride == 1:
        return (n, c, h, w)
    if kind.is_conv:
        k, d = CONV_GEOMETRY[kind]
        p = d * (k - 1) // 2
        return (n, c, (h + 2 * p - d * (k - 1) - 1) // 2 + 1, (w + 2 * p - d * (k - 1) - 1) // 2 + 1)
    if kind is OpKind.IDENTITY:
        return (n, c, h // 2, w // 2)
    return (n, c, (h + 1) // 2, (w + 1) // 2)


def set_mode(module: Module, mode: DomainMode) -> None:
    """Set the weight/activation domain of every conv op under ``module``."""
    for m in module.modules():
        if isinstance(m, ConvOp):
            m.mode = mode


def set_packed(module: Module, packed: bool) -> None:
    for m in module.modules():
        if isinstance(m, ConvOp):
            m.packed = packed
