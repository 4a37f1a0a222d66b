"""Expert fusion, sparse top-k inference and the load-balance objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from . import ops
from .experts import ExpertBundle, ForwardCounter
from .tensor import ConfigError, ShapeError, Tensor, as_tensor, make_result, no_grad

DEFAULT_LAMBDA = 0.01


@dataclass(frozen=True)
class FusionMode:
    """``k=None`` means soft fusion over every expert; otherwise top-k."""

    k: Optional[int] = None

    @classmethod
    def soft_all(cls) -> "FusionMode":
        return cls(None)

    @classmethod
    def top_k(cls, k: int) -> "FusionMode":
        if k < 1:
            raise ConfigError(f"top-k needs k >= 1, got {k}")
        return cls(k)

    @property
    def is_soft(self) -> bool:
        return self.k is None

    def validate(self, num_experts: int) -> None:
        if self.k is not None and not 1 <= self.k <= num_experts:
            raise ConfigError(f"top-k must satisfy 1 <= k <= {num_experts}, got {self.k}")

    def __str__(self) -> str:
        return "soft" if self.k is None else f"top{self.k}"


def fuse_soft(outputs: Sequence[Tensor], P) -> Tensor:
    """``F[b] = sum_k P[b,k] * F_k[b]`` with one scalar weight per image and expert."""
    outputs = [as_tensor(o) for o in outputs]
    P = as_tensor(P)
    if not outputs:
        raise ShapeError("fuse_soft", "no expert outputs")
    shape = outputs[0].shape
    for o in outputs[1:]:
        if o.shape != shape:
            raise ShapeError("fuse_soft", "expert outputs differ in shape", expected=shape, got=o.shape)
    K, B = len(outputs), shape[0]
    if P.shape != (B, K):
        raise ShapeError("fuse_soft", "routing matrix shape", expected=(B, K), got=P.shape)
    bcast = (B,) + (1,) * (len(shape) - 1)
    w = P.data
    out = w[:, 0].reshape(bcast) * outputs[0].data
    for k in range(1, K):
        out = out + w[:, k].reshape(bcast) * outputs[k].data
    axes = tuple(range(1, len(shape)))

    def backward(g):
        grads = [w[:, k].reshape(bcast) * g for k in range(K)]
        gP = np.stack([np.sum(g * outputs[k].data, axis=axes) for k in range(K)], axis=1)
        return grads + [gP]

    return make_result(out, list(outputs) + [P], backward, "fuse_soft")


def top_k_indices(P: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; equal values resolve to the lower index."""
    return np.argsort(-P, axis=1, kind="stable")[:, :k]


def selection_counts(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P)
    return np.bincount(top_k_indices(P, 1)[:, 0], minlength=P.shape[1])


@dataclass
class SparseResult:
    output: Tensor
    selected: np.ndarray  # [B, k]
    P: Tensor
    expert_forwards: int
    per_expert: List[int] = field(default_factory=list)


def infer_sparse(bundle: ExpertBundle, router, image: Tensor, k: int = 1, P=None) -> SparseResult:
    """Run only each image's top-``k`` experts.

    For ``k == 1`` the selected expert's output is returned unscaled. For
    ``k > 1`` the selected probabilities are renormalized to sum to one and
    used as fusion weights. Images sharing an expert are batched together.
    """
    K = bundle.num_experts
    if not 1 <= k <= K:
        raise ConfigError(f"k must satisfy 1 <= k <= {K}, got {k}")
    image = as_tensor(image)
    with no_grad():
        if P is None:
            P = router(image)
        P = as_tensor(P)
        B = image.shape[0]
        if P.shape != (B, K):
            raise ShapeError("infer_sparse", "routing matrix shape", expected=(B, K), got=P.shape)
        selected = top_k_indices(P.data, k)
        counter = ForwardCounter(per_expert=[0] * K)
        expert_out = {}
        for e in range(K):
            rows = np.nonzero((selected == e).any(axis=1))[0]
            if rows.size == 0:
                continue
            out = bundle.expert_forward(e, Tensor(image.data[rows]), counter).data
            for i, b in enumerate(rows):
                expert_out[(int(b), e)] = out[i]
        fused = []
        for b in range(B):
            sel = selected[b]
            if k == 1:
                fused.append(expert_out[(b, int(sel[0]))])
                continue
            w = P.data[b, sel]
            w = w / w.sum()
            acc = w[0] * expert_out[(b, int(sel[0]))]
            for j in range(1, k):
                acc = acc + w[j] * expert_out[(b, int(sel[j]))]
            fused.append(acc)
    return SparseResult(Tensor(np.stack(fused)), selected, P, counter.count, counter.per_expert)


# ---------------------------------------------------------------------------
# load balancing


def expert_mean_activation(P) -> Tensor:
    P = as_tensor(P)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ShapeError("load_balance_loss", "routing matrix needs N >= 1 rows", got=P.shape)
    return ops.mean(P, axis=0)


def expert_load(P) -> Tensor:
    P = as_tensor(P)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ShapeError("load_balance_loss", "routing matrix needs N >= 1 rows", got=P.shape)
    return ops.sum(P, axis=0)


def load_balance_loss(P) -> Tensor:
    """``sum_j mean_i(P[i,j]) * sum_i(P[i,j])``, a differentiable scalar."""
    return ops.sum(ops.mul(expert_mean_activation(P), expert_load(P)))


def load_balance_closed_form(P) -> float:
    """Same quantity through ``N * sum_j pbar_j**2``."""
    P = np.asarray(P.data if isinstance(P, Tensor) else P, dtype=np.float64)
    pbar = P.mean(axis=0)
    return float(P.shape[0] * np.dot(pbar, pbar))


@dataclass
class LossReport:
    task_loss: float
    balance_loss: float
    total: float
    lam: float
    mean_activation: np.ndarray
    load: np.ndarray
    selection_counts: np.ndarray

    @staticmethod
    def csv_header(num_experts: int) -> List[str]:
        return (
            ["step", "task_loss", "balance_loss", "total"]
            + [f"pbar_{k}" for k in range(num_experts)]
            + [f"count_{k}" for k in range(num_experts)]
        )

    def csv_row(self, step: int) -> List[str]:
        return (
            [str(step), repr(self.task_loss), repr(self.balance_loss), repr(self.total)]
            + [repr(float(v)) for v in self.mean_activation]
            + [str(int(c)) for c in self.selection_counts]
        )


def training_objective(task_loss: Tensor, P: Tensor, lam: float = DEFAULT_LAMBDA):
    """Differentiable ``task + lam * balance`` plus the matching :class:`LossReport`."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    balance = load_balance_loss(P)
    total = ops.add(task_loss, ops.mul(balance, float(lam))) if lam else task_loss
    report = total_loss(task_loss.item(), P, lam, balance=balance.item())
    return total, report


def total_loss(task_loss: Union[float, Tensor], P, lam: float = DEFAULT_LAMBDA, balance: Optional[float] = None) -> LossReport:
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    task = task_loss.item() if isinstance(task_loss, Tensor) else float(task_loss)
    Pd = np.asarray(P.data if isinstance(P, Tensor) else P, dtype=np.float64)
    if balance is None:
        with no_grad():
            balance = load_balance_loss(Pd).item()
    return LossReport(
        task_loss=task,
        balance_loss=float(balance),
        total=task + lam * float(balance),
        lam=float(lam),
        mean_activation=Pd.mean(axis=0),
        load=Pd.sum(axis=0),
        selection_counts=selection_counts(Pd),
    )
