"""Models, the soft-gated training loop and evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .data import NUM_CLASSES, SyntheticScene, generate_dataset, stack_batch
from .experts import OUT_CHANNELS, Adapter, ExpertBundle, ExpertKind, build_expert
from .moe import FusionMode, LossReport, fuse_soft, infer_sparse, selection_counts, training_objective
from .nn import Linear, Module
from .optim import AdamW, cosine_warmup_lr, default_warmup
from .router import SarConfig, SelfAttentionRouter
from .tensor import ConfigError, Tensor, no_grad

EVAL_SEED_OFFSET = 10_000


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.01
    warmup_iters: Optional[int] = None  # None: default_warmup(total steps)
    epochs: int = 20
    batch_size: int = 4
    lam: float = 0.01
    seed: int = 0
    n_train: int = 400
    n_eval: int = 200
    num_experts: int = 4
    d_emb: int = 128
    heads: int = 4

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "n_train", "n_eval", "num_experts", "d_emb", "heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.num_experts < 2:
            raise ConfigError(f"need at least 2 experts, got {self.num_experts}")
        if self.warmup_iters is not None and not 0 <= self.warmup_iters < self.total_steps:
            raise ConfigError(f"warmup_iters must be in [0, {self.total_steps}), got {self.warmup_iters}")
        SarConfig(self.d_emb, self.heads, self.num_experts)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n_train / self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup(self) -> int:
        return default_warmup(self.total_steps) if self.warmup_iters is None else self.warmup_iters

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def expert_kinds(num_experts: int) -> List[ExpertKind]:
    """The four paradigms in order, cycled when more than four experts are requested."""
    return [ExpertKind(i % len(ExpertKind)) for i in range(num_experts)]


def global_avg_pool(x: Tensor) -> Tensor:
    return ops.mean(x, axis=(2, 3))


class CbdesMoE(Module):
    """Experts + router + linear classification head on the pooled fused map."""

    def __init__(self, num_experts: int = 4, d_emb: int = 128, heads: int = 4, seed: int = 0, num_classes: int = NUM_CLASSES):
        self.bundle = ExpertBundle(3, seed, expert_kinds(num_experts))
        self.router = SelfAttentionRouter(3, SarConfig(d_emb, heads, num_experts), seed)
        self.head = Linear(OUT_CHANNELS, num_classes, np.random.default_rng([int(seed), 31337]))

    @classmethod
    def from_config(cls, config: TrainConfig) -> "CbdesMoE":
        return cls(config.num_experts, config.d_emb, config.heads, config.seed)

    @property
    def num_experts(self) -> int:
        return self.bundle.num_experts

    def classify(self, fused: Tensor) -> Tensor:
        return self.head(global_avg_pool(fused))

    def forward(self, image: Tensor):
        """Soft-gated forward: ``(logits, P)``."""
        outputs = self.bundle.forward_all(image)
        P = self.router(image)
        return self.classify(fuse_soft(outputs, P)), P


class SingleExpertModel(Module):
    """One backbone + adapter + head, no routing; the baseline for comparisons."""

    def __init__(self, kind, seed: int = 0, num_classes: int = NUM_CLASSES):
        self.kind = ExpertKind(kind)
        self.expert = build_expert(self.kind, 3, seed)
        rng = np.random.default_rng([int(seed), 7919])
        self.adapter = Adapter(self.expert.out_channels, OUT_CHANNELS, rng)
        self.head = Linear(OUT_CHANNELS, num_classes, np.random.default_rng([int(seed), 31337]))

    num_experts = 1

    def forward(self, image: Tensor):
        logits = self.head(global_avg_pool(self.adapter(self.expert(image))))
        return logits, Tensor(np.ones((image.shape[0], 1)))


class Trainer:
    def __init__(self, model: Module, config: TrainConfig):
        self.model = model
        self.config = config
        self.optimizer = AdamW(model.parameters(), weight_decay=config.weight_decay)
        self.step = 0

    def lr_at(self, step: int) -> float:
        """Rate for update ``step`` (0-based): schedule point ``step + 1`` on a ``total + 1`` horizon,
        so neither the first nor the last update gets a zero rate."""
        c = self.config
        return cosine_warmup_lr(step + 1, c.total_steps + 1, c.warmup, c.lr)

    def train_step(self, images: np.ndarray, labels: np.ndarray) -> LossReport:
        if len(labels) == 0:
            raise ValueError("empty batch")
        model = self.model
        model.train()
        logits, P = model(Tensor(images))
        task = ops.cross_entropy(logits, labels)
        lam = self.config.lam if model.num_experts > 1 else 0.0
        objective, report = training_objective(task, P, lam)
        self.optimizer.zero_grad()
        objective.backward()
        self.optimizer.step(self.lr_at(self.step))
        self.step += 1
        return report

    def batches(self, scenes: Sequence[SyntheticScene], epoch: int):
        order = np.random.default_rng([int(self.config.seed), 0xE90C, epoch]).permutation(len(scenes))
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            yield stack_batch([scenes[i] for i in order[start : start + bs]])

    def fit(self, scenes: Sequence[SyntheticScene], on_step: Optional[Callable[[int, LossReport], None]] = None) -> List[LossReport]:
        reports = []
        for epoch in range(self.config.epochs):
            for images, labels, _ in self.batches(scenes, epoch):
                report = self.train_step(images, labels)
                if on_step is not None:
                    on_step(self.step - 1, report)
                reports.append(report)
        return reports


def train_step(model: Module, batch, config: TrainConfig, step: int, trainer: Optional[Trainer] = None) -> LossReport:
    """One soft-gated optimization step on ``batch = (images, labels)``."""
    trainer = trainer or Trainer(model, config)
    trainer.step = step
    images, labels = batch[0], batch[1]
    return trainer.train_step(images, labels)


def selection_entropy(counts) -> float:
    """Shannon entropy (bits) of the normalized selection histogram."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum()) + 0.0


@dataclass
class EvalResult:
    accuracy: float
    mean_P: np.ndarray
    selection_counts: np.ndarray
    selection_entropy: float
    P: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)

    @property
    def max_share(self) -> float:
        total = self.selection_counts.sum()
        return float(self.selection_counts.max() / total) if total else 0.0

    def summary(self) -> Dict:
        return {
            "accuracy": self.accuracy,
            "mean_P": [float(v) for v in self.mean_P],
            "selection_counts": [int(c) for c in self.selection_counts],
            "selection_entropy": self.selection_entropy,
            "max_expert_share": self.max_share,
        }


def evaluate(model: Module, scenes: Sequence[SyntheticScene], mode: FusionMode = FusionMode.soft_all(), batch_size: int = 32) -> EvalResult:
    """Eval-mode accuracy and routing statistics.

    Selection counts are each image's top-1 expert (ties to the lower index)
    under every mode; the entropy is taken over those counts in bits.
    """
    if not scenes:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    Ps, preds, labels_all = [], [], []
    try:
        with no_grad():
            for start in range(0, len(scenes), batch_size):
                images, labels, _ = stack_batch(scenes[start : start + batch_size])
                x = Tensor(images)
                if isinstance(model, CbdesMoE):
                    mode.validate(model.num_experts)
                    if mode.is_soft:
                        logits, P = model(x)
                    else:
                        res = infer_sparse(model.bundle, model.router, x, mode.k)
                        logits, P = model.classify(res.output), res.P
                else:
                    logits, P = model(x)
                Ps.append(P.data)
                preds.append(np.argmax(logits.data, axis=1))
                labels_all.append(labels)
    finally:
        model.train(was_training)
    P = np.concatenate(Ps)
    pred = np.concatenate(preds)
    counts = selection_counts(P)
    return EvalResult(
        accuracy=float(np.mean(pred == np.concatenate(labels_all))),
        mean_P=P.mean(axis=0),
        selection_counts=counts,
        selection_entropy=selection_entropy(counts),
        P=P,
        predictions=pred,
    )


def datasets(config: TrainConfig):
    """Train and held-out scenes for ``config.seed``."""
    return generate_dataset(config.n_train, config.seed), generate_dataset(config.n_eval, config.seed + EVAL_SEED_OFFSET)
