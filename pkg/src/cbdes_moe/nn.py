"""Small module system: parameter containers and the layers the models use."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Base class; parameters and sub-modules are discovered from attributes."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module, ops.RunningStats)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                value.name = full
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        """Non-learned state (normalization running statistics), by name."""
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, ops.RunningStats):
                yield f"{full}.mean", value.mean
                yield f"{full}.var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Parameters followed by buffers, in a stable order."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding=None):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator):
        self.weight = Parameter(he_normal(rng, (channels, 1, kernel, kernel), kernel * kernel))
        self.bias = Parameter(np.zeros(channels))
        self.padding = kernel // 2

    def forward(self, x):
        return ops.depthwise_conv2d(x, self.weight, self.bias, self.padding)


class ChannelNorm(Module):
    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.stats = ops.RunningStats(channels)

    def forward(self, x):
        return ops.channel_norm(x, self.gamma, self.beta, self.stats, self.training)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)


class ChannelLayerNorm(LayerNorm):
    """Layer norm over the channel axis of a ``[B,C,H,W]`` map."""

    def forward(self, x):
        y = ops.layer_norm(ops.transpose(x, (0, 2, 3, 1)), self.gamma, self.beta)
        return ops.transpose(y, (0, 3, 1, 2))


class PReLU(Module):
    def __init__(self, num: int = 1, init: float = 0.25):
        self.alpha = Parameter(np.full(num, init))

    def forward(self, x):
        return ops.prelu(x, self.alpha)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        self.weight = Parameter(xavier_uniform(rng, dout, din))
        self.bias = Parameter(np.zeros(dout))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        for proj in ("q", "k", "v", "o"):
            setattr(self, f"w{proj}", Parameter(xavier_uniform(rng, dim, dim)))
            setattr(self, f"b{proj}", Parameter(np.zeros(dim)))

    def param_map(self) -> Dict[str, Tensor]:
        return {n: getattr(self, n) for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}

    def forward(self, tokens, kv_tokens=None, groups: int = 1):
        return ops.multi_head_attention(tokens, self.param_map(), self.heads, kv_tokens, groups)


class ConvModule(Module):
    """3x3 conv -> batch norm -> PReLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride)
        self.norm = ChannelNorm(cout)
        self.act = PReLU(cout)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))
