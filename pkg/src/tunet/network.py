"""Convolution blocks, U-Net sub-networks and the three-stage cascade.

The cascade chains a whole-tumor network, a core network and an enhancing
network. Each later stage sees the multi-modal input concatenated with the
probability maps of the stages before it, and all three are trained jointly
through a single graph.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import Conv3d, InstanceNorm3d, Linear, Module
from .tensor import Tensor

SE_REDUCTION = 4


class BlockKind(str, enum.Enum):
    PLAIN = "plain"
    RES1 = "res1"
    RES2 = "res2"


@dataclass(frozen=True)
class BlockVariant:
    kind: BlockKind = BlockKind.PLAIN
    with_se: bool = False

    @property
    def model_name(self) -> str:
        name = "TuNet"
        if self.kind is BlockKind.RES1:
            name += " + RES1"
        elif self.kind is BlockKind.RES2:
            name += " + RES2"
        return name + (" + SEB" if self.with_se else "")

    @classmethod
    def all(cls) -> list["BlockVariant"]:
        """The six model variants: each block kind with and without SE."""
        return [cls(kind, se) for kind in BlockKind for se in (False, True)]

    @classmethod
    def parse(cls, text: str) -> "BlockVariant":
        """Parse strings like ``"plain"``, ``"res1+se"``."""
        parts = [p.strip().lower() for p in text.split("+")]
        with_se = "se" in parts or "seb" in parts
        kinds = [p for p in parts if p not in ("se", "seb", "tunet")]
        kind = BlockKind(kinds[0]) if kinds else BlockKind.PLAIN
        return cls(kind, with_se)

    def __str__(self) -> str:
        return self.kind.value + ("+se" if self.with_se else "")


@dataclass(frozen=True)
class SubNetSpec:
    levels: int = 5
    base_filters: int = 16
    patch_shape: tuple[int, int, int] = (80, 96, 64)
    block: BlockVariant = field(default_factory=BlockVariant)
    extra_input_channels: int = 0
    padding: str = "replicate"

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_filters < 1:
            raise ConfigError("base_filters must be positive")
        step = 2 ** (self.levels - 1)
        for axis, s in zip(("depth", "height", "width"), self.patch_shape):
            if s % step:
                raise ConfigError(f"patch {axis} {s} is not divisible by 2^(levels-1) = {step}")

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level


@dataclass(frozen=True)
class CascadeSpec:
    w_net: SubNetSpec
    c_net: SubNetSpec
    e_net: SubNetSpec
    input_channels: int = 4
    detach_cascade: bool = False

    def __post_init__(self):
        for name, net, extra in (("w_net", self.w_net, 0), ("c_net", self.c_net, 1), ("e_net", self.e_net, 2)):
            if net.extra_input_channels != extra:
                raise ConfigError(f"{name}.extra_input_channels must be {extra}, got {net.extra_input_channels}")
        if not (self.w_net.patch_shape == self.c_net.patch_shape == self.e_net.patch_shape):
            raise ConfigError("all sub-networks must share the patch shape")

    @classmethod
    def uniform(cls, levels: int = 5, base_filters: int = 16, patch_shape=(80, 96, 64),
                block: BlockVariant | None = None, padding: str = "replicate",
                detach_cascade: bool = False) -> "CascadeSpec":
        """Three sub-networks sharing every hyperparameter except their extra inputs."""
        base = SubNetSpec(levels, base_filters, tuple(patch_shape), block or BlockVariant(), 0, padding)
        return cls(base, replace(base, extra_input_channels=1), replace(base, extra_input_channels=2),
                   detach_cascade=detach_cascade)

    @property
    def patch_shape(self) -> tuple[int, int, int]:
        return self.w_net.patch_shape

    def to_dict(self) -> dict:
        def net(s: SubNetSpec) -> dict:
            d = asdict(s)
            d["patch_shape"] = list(s.patch_shape)
            d["block"] = {"kind": s.block.kind.value, "with_se": s.block.with_se}
            return d

        return {"w_net": net(self.w_net), "c_net": net(self.c_net), "e_net": net(self.e_net),
                "input_channels": self.input_channels, "detach_cascade": self.detach_cascade}

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeSpec":
        def net(x: dict) -> SubNetSpec:
            x = dict(x)
            b = x.pop("block")
            return SubNetSpec(block=BlockVariant(BlockKind(b["kind"]), bool(b["with_se"])),
                              patch_shape=tuple(x.pop("patch_shape")), **x)

        return cls(net(d["w_net"]), net(d["c_net"]), net(d["e_net"]),
                   d.get("input_channels", 4), d.get("detach_cascade", False))


@dataclass
class RegionProbMaps:
    """Per-voxel probabilities for the whole, core and enhancing regions.

    Fields hold tensors during training and plain arrays after inference.
    """

    p_whole: object
    p_core: object
    p_enh: object

    def as_arrays(self) -> "RegionProbMaps":
        return RegionProbMaps(*(np.asarray(m) for m in self))

    def __iter__(self):
        return iter((self.p_whole, self.p_core, self.p_enh))

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.p_whole)


# blocks -------------------------------------------------------------------------------

class ConvBlock(Module):
    """conv -> instance norm -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int, *, rng, padding: str = "replicate"):
        self.conv = Conv3d(in_channels, out_channels, 3, padding, rng=rng, bias=False)
        self.norm = InstanceNorm3d(out_channels)
        self.in_channels, self.out_channels = in_channels, out_channels

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-4] != self.in_channels:
            raise DimensionError(f"ConvBlock expects {self.in_channels} channels, got {x.shape[-4]}", axis="channels")
        return ops.relu(self.norm(self.conv(x)))


class SEBlock(Module):
    """Squeeze-and-excitation channel gating.

    Global average pooling, a bottleneck pair of fully connected layers and a
    sigmoid produce one gate per channel that rescales the input.
    """

    def __init__(self, channels: int, reduction: int = SE_REDUCTION, *, rng):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng=rng)
        self.fc2 = Linear(hidden, channels, rng=rng)
        self.channels = channels

    def gates(self, x: Tensor) -> Tensor:
        z = ops.relu(self.fc1(ops.global_avg_pool(x)))
        return ops.sigmoid(self.fc2(z))

    def forward(self, x: Tensor) -> Tensor:
        return ops.scale_channels(x, self.gates(x))


class ResBlock(Module):
    """Residual block in pre-activation (``RES1``) or post-activation (``RES2``) form.

    RES1: ``x + conv(relu(in(conv(relu(in(x))))))``
    RES2: ``relu(x + in(conv(relu(in(conv(x))))))``

    A 1x1x1 projection replaces the identity shortcut when channel counts differ.
    """

    def __init__(self, in_channels: int, out_channels: int, kind: BlockKind, *, rng,
                 padding: str = "replicate", project: bool = True):
        if kind is BlockKind.PLAIN:
            raise ValueError("ResBlock needs RES1 or RES2")
        if in_channels != out_channels and not project:
            raise DimensionError(f"residual block {in_channels}->{out_channels} needs a projection", axis="channels")
        self.kind = kind
        self.in_channels, self.out_channels = in_channels, out_channels
        if kind is BlockKind.RES1:
            self.norm1 = InstanceNorm3d(in_channels)
            self.conv1 = Conv3d(in_channels, out_channels, 3, padding, rng=rng, bias=False)
            self.norm2 = InstanceNorm3d(out_channels)
            self.conv2 = Conv3d(out_channels, out_channels, 3, padding, rng=rng)
        else:
            self.conv1 = Conv3d(in_channels, out_channels, 3, padding, rng=rng, bias=False)
            self.norm1 = InstanceNorm3d(out_channels)
            self.conv2 = Conv3d(out_channels, out_channels, 3, padding, rng=rng, bias=False)
            self.norm2 = InstanceNorm3d(out_channels)
        self.proj = Conv3d(in_channels, out_channels, 1, rng=rng) if in_channels != out_channels else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-4] != self.in_channels:
            raise DimensionError(f"ResBlock expects {self.in_channels} channels, got {x.shape[-4]}", axis="channels")
        shortcut = self.proj(x) if self.proj is not None else x
        if self.kind is BlockKind.RES1:
            h = self.conv1(ops.relu(self.norm1(x)))
            h = self.conv2(ops.relu(self.norm2(h)))
            return ops.add(shortcut, h)
        h = ops.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return ops.relu(ops.add(shortcut, h))


class Stage(Module):
    """One block of the given variant, followed by SE gating when enabled."""

    def __init__(self, in_channels: int, out_channels: int, variant: BlockVariant, *, rng,
                 padding: str = "replicate"):
        if variant.kind is BlockKind.PLAIN:
            self.block = ConvBlock(in_channels, out_channels, rng=rng, padding=padding)
        else:
            self.block = ResBlock(in_channels, out_channels, variant.kind, rng=rng, padding=padding)
        self.se = SEBlock(out_channels, rng=rng) if variant.with_se else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.block(x)
        return self.se(y) if self.se is not None else y


# sub-network ------------------------------------------------------------------------

class SubNet(Module):
    """U-Net encoder-decoder with an input pyramid and a sigmoid head.

    At every encoder level below the top, the max-pooled features are
    concatenated with the input block-averaged to that resolution. Decoder
    levels upsample by nearest-neighbor replication, apply a block, concatenate
    the encoder skip and reduce back to the level width with another block.
    """

    def __init__(self, spec: SubNetSpec, in_channels: int, *, rng: np.random.Generator):
        self.spec = spec
        self.in_channels = in_channels
        v, pad, L = spec.block, spec.padding, spec.levels
        self.encoder_in_channels = [in_channels] + [spec.filters(l - 1) + in_channels for l in range(1, L)]
        self.enc = [Stage(self.encoder_in_channels[l], spec.filters(l), v, rng=rng, padding=pad) for l in range(L)]
        self.enc_se = [SEBlock(self.encoder_in_channels[l], rng=rng) if v.with_se else None for l in range(1, L)]
        self.up = [Stage(spec.filters(l + 1), spec.filters(l), v, rng=rng, padding=pad) for l in range(L - 1)]
        self.dec_se = [SEBlock(2 * spec.filters(l), rng=rng) if v.with_se else None for l in range(L - 1)]
        self.dec = [Stage(2 * spec.filters(l), spec.filters(l), v, rng=rng, padding=pad) for l in range(L - 1)]
        self.head = Conv3d(spec.base_filters, 1, 1, rng=rng)
        self._audit()

    def _audit(self) -> None:
        s = self.spec
        for l in range(1, s.levels):
            expected = s.base_filters * 2 ** (l - 1) + self.in_channels
            if self.encoder_in_channels[l] != expected:
                raise AssertionError(f"level {l}: {self.encoder_in_channels[l]} input channels, expected {expected}")

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-4] != self.in_channels:
            raise DimensionError(f"sub-network expects {self.in_channels} input channels, got {x.shape[-4]}",
                                 axis="channels")
        step = 2 ** (self.spec.levels - 1)
        for axis, s in zip(("depth", "height", "width"), x.shape[-3:]):
            if s % step:
                raise DimensionError(f"spatial size {s} not divisible by {step}", axis=axis)
        skips = []
        h = self.enc[0](x)
        skips.append(h)
        for l in range(1, self.spec.levels):
            h = ops.concat_channels(ops.maxpool3d(h), ops.downsample_avg(x, 2 ** l))
            if self.enc_se[l - 1] is not None:
                h = self.enc_se[l - 1](h)
            h = self.enc[l](h)
            skips.append(h)
        for l in range(self.spec.levels - 2, -1, -1):
            h = self.up[l](ops.upsample3d_nearest(h, 2))
            h = ops.concat_channels(h, skips[l])
            if self.dec_se[l] is not None:
                h = self.dec_se[l](h)
            h = self.dec[l](h)
        return ops.sigmoid(self.head(h))


class Cascade(Module):
    """Whole -> core -> enhancing cascade of three independently weighted sub-networks."""

    def __init__(self, spec: CascadeSpec, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.spec = spec
        c = spec.input_channels
        self.w_net = SubNet(spec.w_net, c + spec.w_net.extra_input_channels, rng=rng)
        self.c_net = SubNet(spec.c_net, c + spec.c_net.extra_input_channels, rng=rng)
        self.e_net = SubNet(spec.e_net, c + spec.e_net.extra_input_channels, rng=rng)

    def forward(self, x) -> RegionProbMaps:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-4] != self.spec.input_channels:
            raise DimensionError(f"cascade expects {self.spec.input_channels} input channels, got {x.shape[-4]}",
                                 axis="channels")
        p_whole = self.w_net(x)
        feed_w = p_whole.detach() if self.spec.detach_cascade else p_whole
        p_core = self.c_net(ops.concat_channels(x, feed_w))
        feed_c = p_core.detach() if self.spec.detach_cascade else p_core
        p_enh = self.e_net(ops.concat_channels(x, feed_w, feed_c))
        return RegionProbMaps(p_whole, p_core, p_enh)


def cascade_forward(x, model: Cascade) -> RegionProbMaps:
    return model(x)
