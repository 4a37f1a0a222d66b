"""Four structurally different toy backbones and the adapters that align their outputs.

Every expert downsamples by 2 three times (total factor 8) and ends in a
1x1-conv adapter to a shared channel count, so a ``[B,3,32,32]`` image maps
to ``[B,64,4,4]`` regardless of which expert ran. The deepest, widest stage
of each expert works at the lowest resolution; that is where most of the
parameters live.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import ops
from .nn import (
    ChannelLayerNorm,
    ChannelNorm,
    Conv2d,
    ConvModule,
    DepthwiseConv2d,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    PReLU,
)
from .tensor import ConfigError, ShapeError, Tensor

DOWNSAMPLE = 8
OUT_CHANNELS = 64


class ExpertKind(enum.IntEnum):
    WindowedAttention = 0
    ResidualConv = 1
    ModernConv = 2
    PyramidAttention = 3


# ---------------------------------------------------------------------------
# token helpers


def map_to_tokens(x: Tensor) -> Tensor:
    """``[B,C,H,W]`` -> ``[B,H*W,C]``, row-major over the grid."""
    B, C, H, W = x.shape
    return ops.transpose(ops.reshape(x, (B, C, H * W)), (0, 2, 1))


def tokens_to_map(t: Tensor, H: int, W: int) -> Tensor:
    B, N, C = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 1)), (B, C, H, W))


def map_to_window_tokens(x: Tensor, win: int = 2) -> Tensor:
    """``[B,C,H,W]`` -> ``[B,H*W,C]`` ordered window by window (each window contiguous)."""
    B, C, H, W = x.shape
    t = ops.reshape(x, (B, C, H // win, win, W // win, win))
    t = ops.transpose(t, (0, 2, 4, 3, 5, 1))
    return ops.reshape(t, (B, H * W, C))


def window_tokens_to_map(t: Tensor, H: int, W: int, win: int = 2) -> Tensor:
    B, N, C = t.shape
    x = ops.reshape(t, (B, H // win, W // win, win, win, C))
    x = ops.transpose(x, (0, 5, 1, 3, 2, 4))
    return ops.reshape(x, (B, C, H, W))


class TokenMLP(Module):
    def __init__(self, dim: int, expansion: int, rng):
        self.fc1 = Linear(dim, dim * expansion, rng)
        self.act = PReLU(1)
        self.fc2 = Linear(dim * expansion, dim, rng)

    def forward(self, t):
        return self.fc2(self.act(self.fc1(t)))


# ---------------------------------------------------------------------------
# WindowedAttention (hierarchical transformer with local windows)


class WindowBlock(Module):
    def __init__(self, dim: int, heads: int, rng, expansion: int = 4, window: int = 2):
        self.window = window
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = TokenMLP(dim, expansion, rng)

    def forward(self, x):
        B, C, H, W = x.shape
        t = map_to_window_tokens(x, self.window)
        n_windows = (H // self.window) * (W // self.window)
        t = t + self.attn(self.norm1(t), groups=n_windows)
        t = t + self.mlp(self.norm2(t))
        return window_tokens_to_map(t, H, W, self.window)


class WindowedAttentionExpert(Module):
    def __init__(self, in_channels: int, rng, widths=(32, 96, 384), heads=(2, 4, 8), depths=(1, 1, 2)):
        self.stages = []
        cin = in_channels
        for i, (c, h, d) in enumerate(zip(widths, heads, depths)):
            merge = Conv2d(cin, c, 3, rng, stride=2)
            norm = ChannelLayerNorm(c)
            blocks = [WindowBlock(c, h, rng) for _ in range(d)]
            self.stages.append(_Stage(merge, norm, blocks))
            cin = c
        self.out_channels = cin

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return x


class _Stage(Module):
    def __init__(self, down: Module, norm: Optional[Module], blocks: Sequence[Module]):
        self.down = down
        if norm is not None:
            self.norm = norm
        self.blocks = list(blocks)

    def forward(self, x):
        x = self.down(x)
        if hasattr(self, "norm"):
            x = self.norm(x)
        for block in self.blocks:
            x = block(x)
        return x


# ---------------------------------------------------------------------------
# ResidualConv (basic-block residual network)


class ResidualBlock(Module):
    def __init__(self, channels: int, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.norm1 = ChannelNorm(channels)
        self.act1 = PReLU(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng)
        self.norm2 = ChannelNorm(channels)
        self.act2 = PReLU(channels)

    def forward(self, x):
        y = self.act1(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act2(y + x)


class _PoolThenConv(Module):
    def __init__(self, cin: int, cout: int, rng):
        self.proj = ConvModule(cin, cout, rng)

    def forward(self, x):
        return self.proj(ops.maxpool2x2(x))


class ResidualConvExpert(Module):
    def __init__(self, in_channels: int, rng, widths=(32, 128, 288), depths=(1, 1, 2), stem: int = 16):
        self.stem = ConvModule(in_channels, stem, rng)
        self.stages = []
        cin = stem
        for c, d in zip(widths, depths):
            self.stages.append(_Stage(_PoolThenConv(cin, c, rng), None, [ResidualBlock(c, rng) for _ in range(d)]))
            cin = c
        self.out_channels = cin

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x


# ---------------------------------------------------------------------------
# ModernConv (depthwise + inverted-bottleneck blocks, layer-norm style)


class ModernBlock(Module):
    def __init__(self, channels: int, rng, expansion: int = 4):
        self.dw = DepthwiseConv2d(channels, 3, rng)
        self.norm = ChannelLayerNorm(channels)
        self.pw1 = Conv2d(channels, channels * expansion, 1, rng)
        self.act = PReLU(1)
        self.pw2 = Conv2d(channels * expansion, channels, 1, rng)

    def forward(self, x):
        y = self.pw2(self.act(self.pw1(self.norm(self.dw(x)))))
        return x + y


class ModernConvExpert(Module):
    def __init__(self, in_channels: int, rng, widths=(24, 96, 448), depths=(1, 1, 2)):
        self.stages = []
        cin = in_channels
        for c, d in zip(widths, depths):
            down = Conv2d(cin, c, 3, rng, stride=2)
            self.stages.append(_Stage(down, ChannelLayerNorm(c), [ModernBlock(c, rng) for _ in range(d)]))
            cin = c
        self.out_channels = cin

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return x


# ---------------------------------------------------------------------------
# PyramidAttention (spatial-reduction attention)


class ReductionBlock(Module):
    """Attention whose keys/values come from a 2x2 average-pooled copy of the map."""

    def __init__(self, dim: int, heads: int, rng, expansion: int = 4):
        self.norm1 = LayerNorm(dim)
        self.kv_norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = TokenMLP(dim, expansion, rng)

    def forward(self, x):
        B, C, H, W = x.shape
        t = map_to_tokens(x)
        kv = self.kv_norm(map_to_tokens(ops.avgpool2x2(x)))
        t = t + self.attn(self.norm1(t), kv_tokens=kv)
        t = t + self.mlp(self.norm2(t))
        return tokens_to_map(t, H, W)


class PyramidAttentionExpert(Module):
    def __init__(self, in_channels: int, rng, widths=(32, 64, 400), heads=(1, 2, 8), depths=(1, 1, 2)):
        self.stages = []
        cin = in_channels
        for c, h, d in zip(widths, heads, depths):
            embed = Conv2d(cin, c, 3, rng, stride=2)
            self.stages.append(_Stage(embed, ChannelLayerNorm(c), [ReductionBlock(c, h, rng) for _ in range(d)]))
            cin = c
        self.out_channels = cin

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return x


_BUILDERS = {
    ExpertKind.WindowedAttention: WindowedAttentionExpert,
    ExpertKind.ResidualConv: ResidualConvExpert,
    ExpertKind.ModernConv: ModernConvExpert,
    ExpertKind.PyramidAttention: PyramidAttentionExpert,
}


def build_expert(kind, in_channels: int, seed: int) -> Module:
    """Construct one backbone of the given paradigm with weights drawn from ``seed``."""
    try:
        kind = ExpertKind(kind)
    except ValueError:
        raise ConfigError(f"unknown expert kind {kind!r}") from None
    if in_channels < 1:
        raise ConfigError(f"in_channels must be >= 1, got {in_channels}")
    rng = np.random.default_rng([int(seed), int(kind)])
    return _BUILDERS[kind](in_channels, rng)


class Adapter(Module):
    """1x1 conv projecting an expert's channels to the shared width."""

    def __init__(self, cin: int, cout: int, rng):
        self.proj = Conv2d(cin, cout, 1, rng)

    def forward(self, x):
        return self.proj(x)


@dataclass
class ForwardCounter:
    """Per-call tally of single-image expert forward passes."""

    count: int = 0
    per_expert: List[int] = field(default_factory=list)

    def add(self, k: int, n_images: int) -> None:
        if len(self.per_expert) <= k:
            self.per_expert.extend([0] * (k + 1 - len(self.per_expert)))
        self.per_expert[k] += n_images
        self.count += n_images


class ExpertBundle(Module):
    """K experts plus their adapters, all producing ``[B, out_channels, H/8, W/8]``.

    ``kinds`` defaults to one expert of each paradigm; any sequence of two or
    more kinds (repeats allowed) is accepted.
    """

    def __init__(self, in_channels: int = 3, seed: int = 0, kinds: Optional[Sequence] = None, out_channels: int = OUT_CHANNELS):
        if kinds is None:
            kinds = list(ExpertKind)
        kinds = [ExpertKind(k) for k in kinds]
        if len(kinds) < 2:
            raise ConfigError(f"an expert bundle needs at least 2 experts, got {len(kinds)}")
        self.kinds = kinds
        self.out_channels = out_channels
        self.experts = [build_expert(kind, in_channels, seed + 1000 * i) for i, kind in enumerate(kinds)]
        rng = np.random.default_rng([int(seed), 7919])
        self.adapters = [Adapter(e.out_channels, out_channels, rng) for e in self.experts]
        for a in self.adapters:
            a.proj.bias.data[:] = 0.0

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def out_resolution(self, H: int, W: int):
        return H // DOWNSAMPLE, W // DOWNSAMPLE

    def expert_forward(self, k: int, image: Tensor, counter: Optional[ForwardCounter] = None) -> Tensor:
        if not 0 <= k < self.num_experts:
            raise IndexError(f"expert index {k} out of range for K={self.num_experts}")
        if image.ndim != 4:
            raise ShapeError("expert_forward", "expected [B,C,H,W] image", got=image.shape)
        H, W = image.shape[2:]
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise ShapeError("expert_forward", f"spatial dims must be divisible by {DOWNSAMPLE}", got=(H, W))
        if counter is not None:
            counter.add(k, image.shape[0])
        return self.adapters[k](self.experts[k](image))

    def forward_all(self, image: Tensor, counter: Optional[ForwardCounter] = None) -> List[Tensor]:
        return [self.expert_forward(k, image, counter) for k in range(self.num_experts)]

    forward = forward_all

    def expert_parameter_counts(self) -> List[int]:
        return [e.num_parameters() for e in self.experts]


def expert_forward(bundle: ExpertBundle, k: int, image: Tensor, counter: Optional[ForwardCounter] = None) -> Tensor:
    return bundle.expert_forward(k, image, counter)


def forward_all(bundle: ExpertBundle, image: Tensor, counter: Optional[ForwardCounter] = None) -> List[Tensor]:
    return bundle.forward_all(image, counter)
