"""End-to-end runs that produce the on-disk artifacts: training, ablation, baselines."""

from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import dataset_manifest
from .experts import ExpertKind
from .moe import FusionMode, LossReport
from .router import write_routing_csv
from .train import CbdesMoE, EvalResult, SingleExpertModel, TrainConfig, Trainer, datasets, evaluate

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    config: TrainConfig
    model: object
    reports: List[LossReport]
    eval_top1: EvalResult
    eval_soft: EvalResult
    manifest: Dict
    kind: str = "moe"

    @property
    def initial_task_loss(self) -> float:
        w = min(10, self.config.steps_per_epoch)
        return float(np.mean([r.task_loss for r in self.reports[:w]]))

    @property
    def final_task_loss(self) -> float:
        last = self.reports[-self.config.steps_per_epoch :]
        return float(np.mean([r.task_loss for r in last]))

    def summary(self) -> Dict:
        return {
            "model": self.kind,
            "config": self.config.to_dict(),
            "steps": len(self.reports),
            "initial_task_loss": self.initial_task_loss,
            "final_task_loss": self.final_task_loss,
            "eval_top1": self.eval_top1.summary(),
            "eval_soft": self.eval_soft.summary(),
            "dataset": self.manifest,
        }


def checkpoint_config(config: TrainConfig, kind: str = "moe") -> Dict:
    return {"model": kind, "train": config.to_dict()}


def build_model(config: TrainConfig, kind: str = "moe"):
    if kind == "moe":
        return CbdesMoE.from_config(config)
    return SingleExpertModel(ExpertKind[kind], config.seed)


def write_losses_csv(path, reports: Sequence[LossReport], num_experts: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LossReport.csv_header(num_experts))
        for step, r in enumerate(reports):
            w.writerow(r.csv_row(step))


def run_training(config: TrainConfig, out_dir=None, kind: str = "moe") -> RunResult:
    """Train one model; with ``out_dir`` write checkpoint, losses, summary and routing files."""
    train_set, eval_set = datasets(config)
    model = build_model(config, kind)
    trainer = Trainer(model, config)

    def on_step(step: int, report: LossReport) -> None:
        if step % 25 == 0 or step == config.total_steps - 1:
            log.info("step %d/%d task %.4f balance %.4f", step, config.total_steps, report.task_loss, report.balance_loss)

    reports = trainer.fit(train_set, on_step)
    if kind == "moe":
        top1 = evaluate(model, eval_set, FusionMode.top_k(1))
        soft = evaluate(model, eval_set, FusionMode.soft_all())
    else:
        top1 = soft = evaluate(model, eval_set)
    manifest = {"train": dataset_manifest(train_set, config.seed), "eval": dataset_manifest(eval_set, config.seed + 10_000)}
    result = RunResult(config, model, reports, top1, soft, manifest, kind)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.bin", model, checkpoint_config(config, kind))
        write_losses_csv(out / "losses.csv", reports, model.num_experts)
        (out / "summary.txt").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if kind == "moe":
            write_routing_csv(out / "routing.csv", top1.P)
    return result


# ---------------------------------------------------------------------------
# load-balance ablation

# Per-run budget for the ablation: 100 steps at batch 4, two epochs so the
# final-epoch loss is measured on a window disjoint from the first steps.
ABLATION_DEFAULTS = {"epochs": 2, "n_train": 200}
ABLATION_SEEDS = (0, 1, 2)

ABLATION_FIELDS = (
    "seed",
    "lambda",
    "accuracy",
    "selection_entropy",
    "max_expert_share",
    "initial_task_loss",
    "final_task_loss",
)


@dataclass
class AblationRow:
    seed: int
    lam: float
    accuracy: float
    selection_entropy: float
    max_expert_share: float
    initial_task_loss: float
    final_task_loss: float
    P: np.ndarray = field(repr=False)

    def values(self) -> List[float]:
        return [self.accuracy, self.selection_entropy, self.max_expert_share, self.initial_task_loss, self.final_task_loss]


@dataclass
class AblationResult:
    rows: List[AblationRow]
    lam_reg: float

    def by_lambda(self, lam: float) -> List[AblationRow]:
        return [r for r in self.rows if r.lam == lam]

    def median(self, lam: float, attr: str) -> float:
        return float(statistics.median(getattr(r, attr) for r in self.by_lambda(lam)))

    def median_delta(self) -> List[float]:
        """Median over seeds of (regularized - unregularized) for each metric."""
        base = {r.seed: r for r in self.by_lambda(0.0)}
        deltas = [[a - b for a, b in zip(r.values(), base[r.seed].values())] for r in self.by_lambda(self.lam_reg)]
        return [float(statistics.median(col)) for col in zip(*deltas)]


def run_ablation(base: TrainConfig, seeds: Sequence[int], lam_reg: float = 0.01, out_dir=None) -> AblationResult:
    """Paired trainings with and without the balance term for every seed."""
    rows = []
    for seed in seeds:
        for lam in (0.0, lam_reg):
            cfg = replace(base, seed=seed, lam=lam)
            log.info("ablation seed=%d lambda=%g", seed, lam)
            res = run_training(cfg)
            ev = res.eval_top1
            rows.append(
                AblationRow(seed, lam, ev.accuracy, ev.selection_entropy, ev.max_share, res.initial_task_loss, res.final_task_loss, ev.P)
            )
    result = AblationResult(rows, lam_reg)
    if out_dir is not None:
        write_ablation(Path(out_dir), result)
    return result


def _lam_tag(lam: float) -> str:
    return f"{lam:g}"


def write_ablation(out: Path, result: AblationResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_FIELDS)
        for r in result.rows:
            w.writerow([r.seed, _lam_tag(r.lam)] + [repr(v) for v in r.values()])
        w.writerow(["median", f"delta({_lam_tag(result.lam_reg)}-0)"] + [repr(v) for v in result.median_delta()])
    for r in result.rows:
        write_routing_csv(out / f"routing_seed{r.seed}_lambda{_lam_tag(r.lam)}.csv", r.P)
    first = result.rows[0].seed
    for r in result.rows:
        if r.seed == first:
            write_routing_csv(out / f"routing_lambda{_lam_tag(r.lam)}.csv", r.P)


def run_baselines(config: TrainConfig, out_dir=None) -> Dict[str, RunResult]:
    """One single-expert model per paradigm under the same budget as ``config``."""
    results = {}
    for kind in ExpertKind:
        sub = None if out_dir is None else Path(out_dir) / kind.name
        results[kind.name] = run_training(replace(config, lam=0.0), sub, kind=kind.name)
    return results
