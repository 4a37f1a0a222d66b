"""Heterogeneous mixture-of-experts with a self-attention router, on a small numpy autodiff core."""

from .experts import ExpertBundle, ExpertKind, ForwardCounter, build_expert
from .moe import FusionMode, LossReport, fuse_soft, infer_sparse, load_balance_loss, total_loss
from .router import SarConfig, SelfAttentionRouter
from .tensor import ConfigError, GraphError, Parameter, ShapeError, Tensor, no_grad
from .train import CbdesMoE, TrainConfig, Trainer, evaluate

__all__ = [
    "CbdesMoE",
    "ConfigError",
    "ExpertBundle",
    "ExpertKind",
    "ForwardCounter",
    "FusionMode",
    "GraphError",
    "LossReport",
    "Parameter",
    "SarConfig",
    "SelfAttentionRouter",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "build_expert",
    "evaluate",
    "fuse_soft",
    "infer_sparse",
    "load_balance_loss",
    "no_grad",
    "total_loss",
]
__version__ = "0.1.0"
