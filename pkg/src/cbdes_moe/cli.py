"""Command-line front end: ``cbdes-moe {train,eval,ablate-lb,bench}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

from threadpoolctl import threadpool_limits

from .bench import BATCH_SIZES, bench_expert_stage, write_bench_csv
from .checkpoint import CheckpointError, load_state, read_checkpoint
from .experiment import ABLATION_DEFAULTS, ABLATION_SEEDS, build_model, run_ablation, run_baselines, run_training
from .experts import ExpertKind
from .moe import FusionMode
from .router import write_routing_csv
from .tensor import ConfigError, ShapeError
from .train import CbdesMoE, TrainConfig, datasets, evaluate

log = logging.getLogger("cbdes_moe")

# flag dest -> TrainConfig field
_FLAG_FIELDS = {
    "seed": "seed",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "lam": "lam",
    "experts": "num_experts",
    "d_emb": "d_emb",
    "heads": "heads",
    "n_train": "n_train",
    "n_eval": "n_eval",
    "warmup": "warmup_iters",
    "weight_decay": "weight_decay",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line diagnostic instead of usage dump
        raise UsageError(message)


def _config_file(path: Optional[str]) -> Dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    unknown = set(data) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


def resolve_config(args, **defaults) -> TrainConfig:
    """Flags > CBDES_SEED (seed only) > config file > command defaults > TrainConfig defaults."""
    values = dict(defaults)
    values.update(_config_file(getattr(args, "config", None)))
    env_seed = os.environ.get("CBDES_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"CBDES_SEED must be an integer, got {env_seed!r}") from None
    for dest, name in _FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _mode(args) -> FusionMode:
    if args.mode == "soft":
        return FusionMode.soft_all()
    if args.mode == "top1":
        return FusionMode.top_k(1)
    if args.k is None:
        raise ConfigError("--mode topk needs --k")
    return FusionMode.top_k(args.k)


def _out(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    config = resolve_config(args)
    kind = "moe"
    if args.expert_only is not None:
        kind = ExpertKind[args.expert_only].name
    out = _out(args, "run")
    result = run_training(config, out, kind)
    ev = result.eval_top1
    print(
        f"trained {kind} for {len(result.reports)} steps: task loss {result.initial_task_loss:.4f} -> "
        f"{result.final_task_loss:.4f}, eval accuracy {ev.accuracy:.4f}, selection entropy {ev.selection_entropy:.4f}"
    )
    print(f"wrote {out}/checkpoint.bin, losses.csv, summary.txt")
    return 0


def load_model(path):
    snapshot, arrays = read_checkpoint(path)
    try:
        kind = snapshot["model"]
        config = TrainConfig.from_dict(snapshot["train"])
    except (KeyError, TypeError):
        raise CheckpointError("checkpoint config snapshot is missing model or train settings") from None
    model = build_model(config, kind)
    load_state(model, arrays)
    return model, config


def cmd_eval(args) -> int:
    model, config = load_model(args.checkpoint)
    if args.n_eval is not None:
        config = replace(config, n_eval=args.n_eval)
    mode = _mode(args)
    _, eval_set = datasets(config)
    res = evaluate(model, eval_set, mode if isinstance(model, CbdesMoE) else FusionMode.soft_all())
    out = _out(args, str(Path(args.checkpoint).parent))
    out.mkdir(parents=True, exist_ok=True)
    write_routing_csv(out / "routing.csv", res.P)
    print(f"mode: {mode}")
    print(f"accuracy: {res.accuracy:.6f}")
    print("selection_counts: " + " ".join(str(int(c)) for c in res.selection_counts))
    print("mean_routing: " + " ".join(f"{p:.6f}" for p in res.mean_P))
    print(f"selection_entropy: {res.selection_entropy:.6f}")
    return 0


def cmd_ablate_lb(args) -> int:
    base = resolve_config(args, **ABLATION_DEFAULTS)
    seeds = args.seeds if args.seeds is not None else list(ABLATION_SEEDS)
    if len(seeds) < 1:
        raise ConfigError("need at least one seed")
    lam_reg = base.lam
    out = _out(args, "ablation")
    result = run_ablation(base, seeds, lam_reg, out)
    print(f"{'seed':>6} {'lambda':>8} {'accuracy':>9} {'entropy':>8} {'max_share':>9}")
    for r in result.rows:
        print(f"{r.seed:>6} {r.lam:>8g} {r.accuracy:>9.4f} {r.selection_entropy:>8.4f} {r.max_expert_share:>9.4f}")
    d = result.median_delta()
    print(f"{'median':>6} {'delta':>8} {d[0]:>9.4f} {d[1]:>8.4f} {d[2]:>9.4f}")
    print(
        f"median entropy: lambda=0 {result.median(0.0, 'selection_entropy'):.4f}, "
        f"lambda={lam_reg:g} {result.median(lam_reg, 'selection_entropy'):.4f}"
    )
    if args.baselines:
        base_res = run_baselines(replace(base, seed=seeds[0]), out / "baselines")
        for name, r in base_res.items():
            print(f"baseline {name}: accuracy {r.eval_top1.accuracy:.4f}")
    print(f"wrote {out}/ablation.csv")
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint is not None:
        model, _ = load_model(args.checkpoint)
        if not isinstance(model, CbdesMoE):
            raise ConfigError("bench needs a mixture checkpoint, not a single-expert one")
    else:
        model = CbdesMoE.from_config(resolve_config(args))
    if args.repetitions < 1:
        raise ConfigError("--repetitions must be >= 1")
    rows = bench_expert_stage(model, args.batch_sizes, args.repetitions, args.seed or 0)
    out = _out(args, ".")
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out / "bench.csv", rows)
    print(f"{'B':>3} {'soft_s':>10} {'top1_s':>10} {'soft_fw':>8} {'top1_fw':>8} {'speedup':>8}")
    for r in rows:
        print(f"{r.batch:>3} {r.soft_median_s:>10.4f} {r.top1_median_s:>10.4f} {r.soft_forwards:>8} {r.top1_forwards:>8} {r.speedup:>8.2f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float, help="load-balance weight")
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup", type=int, help="warmup iterations")
    p.add_argument("--experts", type=int, metavar="K")
    p.add_argument("--d-emb", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-eval", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cbdes-moe", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--out")
    common.add_argument("--threads", type=_positive_int, default=1, help="BLAS threads (default 1)")

    p = sub.add_parser("train", parents=[common], help="train a model and write checkpoint/losses/summary")
    _config_flags(p)
    p.add_argument("--expert-only", choices=[k.name for k in ExpertKind], help="train a single-expert baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=("soft", "top1", "topk"), default="top1")
    p.add_argument("--k", type=int)
    p.add_argument("--n-eval", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-lb", parents=[common], help="paired trainings with and without load balancing")
    _config_flags(p)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--baselines", action="store_true", help="also train the single-expert baselines")
    p.set_defaults(func=cmd_ablate_lb)

    p = sub.add_parser("bench", parents=[common], help="time the expert stage, soft vs top-1")
    _config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--batch-sizes", type=_positive_int, nargs="+", default=list(BATCH_SIZES))
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, ConfigError, CheckpointError, ShapeError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"cbdes-moe: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
