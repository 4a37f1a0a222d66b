"""Expert-stage timing: soft fusion over all experts vs top-1 sparse activation."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

from .data import generate_dataset, stack_batch
from .experts import ForwardCounter
from .moe import fuse_soft, infer_sparse
from .tensor import Tensor, no_grad
from .train import CbdesMoE

BATCH_SIZES = (1, 2, 4, 8, 16)


@dataclass
class BenchRow:
    batch: int
    repetitions: int
    soft_median_s: float
    top1_median_s: float
    soft_forwards: int
    top1_forwards: int

    @property
    def speedup(self) -> float:
        return self.soft_median_s / self.top1_median_s

    FIELDS = ("batch", "repetitions", "soft_median_s", "top1_median_s", "soft_forwards", "top1_forwards", "speedup")

    def as_row(self) -> List[str]:
        return [
            str(self.batch),
            str(self.repetitions),
            f"{self.soft_median_s:.6e}",
            f"{self.top1_median_s:.6e}",
            str(self.soft_forwards),
            str(self.top1_forwards),
            f"{self.speedup:.4f}",
        ]


def bench_expert_stage(model: CbdesMoE, batch_sizes: Iterable[int] = BATCH_SIZES, repetitions: int = 20, seed: int = 0) -> List[BenchRow]:
    """Median wall time of the expert stage only; routing probabilities are computed beforehand."""
    model.eval()
    scenes = generate_dataset(max(batch_sizes), seed)
    images, _, _ = stack_batch(scenes)
    rows = []
    with no_grad():
        for B in batch_sizes:
            x = Tensor(images[:B])
            P = model.router(x)
            soft_t, top_t = [], []
            soft_n = top_n = 0
            for _ in range(repetitions):
                counter = ForwardCounter()
                t0 = time.perf_counter()
                fuse_soft(model.bundle.forward_all(x, counter), P)
                soft_t.append(time.perf_counter() - t0)
                soft_n = counter.count

                t0 = time.perf_counter()
                res = infer_sparse(model.bundle, model.router, x, 1, P=P)
                top_t.append(time.perf_counter() - t0)
                top_n = res.expert_forwards
            rows.append(BenchRow(B, repetitions, statistics.median(soft_t), statistics.median(top_t), soft_n, top_n))
    return rows


def write_bench_csv(path, rows: List[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BenchRow.FIELDS)
        for r in rows:
            w.writerow(r.as_row())
