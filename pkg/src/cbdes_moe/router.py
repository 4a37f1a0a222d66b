"""Self-attention router: image -> per-image expert probabilities.

Pipeline: three conv/norm/PReLU/max-pool stages (channels C -> c1 -> c2 ->
d_emb, spatial /8), flatten to tokens, one multi-head attention layer
followed by layer norm, mean over tokens, a 3-layer PReLU MLP to K logits,
and a softmax.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import ops
from .nn import ConvModule, LayerNorm, Linear, Module, MultiHeadAttention, PReLU
from .tensor import ConfigError, ShapeError, Tensor


@dataclass(frozen=True)
class SarConfig:
    d_emb: int = 128
    heads: int = 4
    num_experts: int = 4
    channels: Tuple[int, int] = (32, 64)
    mlp_hidden: int = 64

    def __post_init__(self):
        c1, c2 = self.channels
        if self.heads < 1 or self.d_emb % self.heads:
            raise ConfigError(f"d_emb={self.d_emb} must be divisible by heads={self.heads}")
        if self.num_experts < 2:
            raise ConfigError(f"router needs K >= 2 experts, got {self.num_experts}")
        if not (c1 < c2 <= self.d_emb):
            raise ConfigError(f"channel progression must satisfy c1 < c2 <= d_emb, got {self.channels}, {self.d_emb}")


class SelfAttentionRouter(Module):
    def __init__(self, in_channels: int = 3, config: SarConfig = SarConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng([int(seed), 104729])
        c1, c2 = config.channels
        self.conv1 = ConvModule(in_channels, c1, rng)
        self.conv2 = ConvModule(c1, c2, rng)
        self.conv3 = ConvModule(c2, config.d_emb, rng)
        self.attn = MultiHeadAttention(config.d_emb, config.heads, rng)
        self.attn_norm = LayerNorm(config.d_emb)
        self.fc1 = Linear(config.d_emb, config.mlp_hidden, rng)
        self.act1 = PReLU(config.mlp_hidden)
        self.fc2 = Linear(config.mlp_hidden, config.mlp_hidden, rng)
        self.act2 = PReLU(config.mlp_hidden)
        self.fc3 = Linear(config.mlp_hidden, config.num_experts, rng)

    def extract_pyramid(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError("extract_pyramid", "expected [B,C,H,W]", got=x.shape)
        H, W = x.shape[2:]
        if H % 8 or W % 8:
            raise ShapeError("extract_pyramid", "spatial dims must be divisible by 8", got=(H, W))
        x = ops.maxpool2x2(self.conv1(x))
        x = ops.maxpool2x2(self.conv2(x))
        return ops.maxpool2x2(self.conv3(x))

    def attend_and_pool(self, x3: Tensor) -> Tensor:
        B, D, H, W = x3.shape
        tokens = ops.transpose(ops.reshape(x3, (B, D, H * W)), (0, 2, 1))
        attended = self.attn_norm(self.attn(tokens))
        return ops.mean_tokens(attended)

    def score_experts(self, g: Tensor) -> Tensor:
        h = self.act1(self.fc1(g))
        h = self.act2(self.fc2(h))
        return self.fc3(h)

    def logits(self, image: Tensor) -> Tensor:
        return self.score_experts(self.attend_and_pool(self.extract_pyramid(image)))

    def forward(self, image: Tensor) -> Tensor:
        """Routing matrix ``P`` of shape ``[B, K]``."""
        return ops.softmax(self.logits(image), axis=-1)

    route = forward


def route(router: SelfAttentionRouter, image: Tensor) -> Tensor:
    return router(image)


def write_routing_csv(path, P) -> None:
    """One row per image, one column per expert, 6 decimals."""
    P = np.asarray(P.data if isinstance(P, Tensor) else P)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"expert_{k}" for k in range(P.shape[1])])
        for row in P:
            writer.writerow([f"{v:.6f}" for v in row])
