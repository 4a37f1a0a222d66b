import math
import struct
from dataclasses import replace

import numpy as np
import pytest

from cbdes_moe.checkpoint import CheckpointError, decode, load_state, read_checkpoint, save_checkpoint
from cbdes_moe.data import generate_dataset, stack_batch
from cbdes_moe.experts import ExpertKind
from cbdes_moe.moe import FusionMode
from cbdes_moe.tensor import ConfigError
from cbdes_moe.train import CbdesMoE, SingleExpertModel, TrainConfig, Trainer, evaluate, selection_entropy, train_step

SMALL = dict(n_train=8, n_eval=8, batch_size=4, epochs=2)


def small_config(**kw):
    return TrainConfig(**{**SMALL, **kw})


# ---------------------------------------------------------------------------
# config


@pytest.mark.parametrize("field,value", [("lr", 0.0), ("epochs", 0), ("lam", -1.0), ("num_experts", 1), ("heads", 3), ("warmup_iters", 10**6)])
def test_config_rejects(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value})


def test_config_derived_fields():
    c = TrainConfig()
    assert c.steps_per_epoch == 100 and c.total_steps == 2000 and c.warmup == 100
    assert TrainConfig.from_dict({**c.to_dict(), "unused": 1}) == c


# ---------------------------------------------------------------------------
# train_step


def test_lambda_enters_only_the_objective():
    images, labels, _ = stack_batch(generate_dataset(4, 0))
    r0 = [train_step(CbdesMoE(seed=0), (images, labels), small_config(lam=lam), 0) for lam in (0.0, 0.01)]
    assert r0[0].task_loss == r0[1].task_loss
    assert r0[0].balance_loss == r0[1].balance_loss
    assert r0[0].total != r0[1].total


def test_second_step_diverges_between_lambdas():
    images, labels, _ = stack_batch(generate_dataset(4, 0))
    losses = []
    for lam in (0.0, 0.01):
        model = CbdesMoE(seed=0)
        tr = Trainer(model, small_config(lam=lam))
        tr.train_step(images, labels)
        losses.append(tr.train_step(images, labels).task_loss)
    assert losses[0] != losses[1]


def test_soft_gating_reaches_every_module():
    model = CbdesMoE(seed=1)
    images, labels, _ = stack_batch(generate_dataset(4, 1))
    train_step(model, (images, labels), small_config(), 0)
    for part in (*model.bundle.experts, *model.bundle.adapters, model.router, model.head):
        for name, p in part.named_parameters():
            assert p.grad is not None and np.any(p.grad != 0), name


def test_overfit_single_batch():
    images, labels, _ = stack_batch(generate_dataset(2, 3))
    model = CbdesMoE(seed=3)
    trainer = Trainer(model, TrainConfig(n_train=2, batch_size=2, epochs=200, lam=0.01))
    reports = [trainer.train_step(images, labels) for _ in range(200)]
    first, last = reports[0].task_loss, reports[-1].task_loss
    assert last < first
    assert np.mean([r.task_loss for r in reports[-10:]]) < 0.5 * np.mean([r.task_loss for r in reports[:10]])


def test_single_expert_model_trains_without_balance():
    images, labels, _ = stack_batch(generate_dataset(4, 2))
    model = SingleExpertModel(ExpertKind.ModernConv, seed=2)
    r = train_step(model, (images, labels), small_config(lam=0.5), 0)
    assert r.lam == 0.0 and r.total == r.task_loss


# ---------------------------------------------------------------------------
# evaluate


def test_entropy_extremes():
    assert selection_entropy([10, 0, 0, 0]) == 0.0
    assert selection_entropy([5, 5, 5, 5]) == 2.0
    assert selection_entropy([0, 0]) == 0.0


def test_uniform_router_selects_expert_zero():
    model = CbdesMoE(seed=4)
    model.router.fc3.weight.data[:] = 0.0
    model.router.fc3.bias.data[:] = 0.0
    scenes = generate_dataset(6, 4)
    res = evaluate(model, scenes, FusionMode.top_k(1))
    np.testing.assert_array_equal(res.P, 0.25)
    assert res.selection_counts.tolist() == [6, 0, 0, 0]
    assert res.selection_entropy == 0.0


def test_soft_equals_top_k():
    model = CbdesMoE(seed=5)
    scenes = generate_dataset(12, 5)
    soft = evaluate(model, scenes, FusionMode.soft_all())
    topk = evaluate(model, scenes, FusionMode.top_k(4))
    assert soft.accuracy == topk.accuracy
    assert np.array_equal(soft.predictions, topk.predictions)
    assert np.array_equal(soft.P, topk.P)


def test_evaluate_batch_size_does_not_change_results():
    model = CbdesMoE(seed=6)
    scenes = generate_dataset(10, 6)
    a = evaluate(model, scenes, FusionMode.top_k(1), batch_size=3)
    b = evaluate(model, scenes, FusionMode.top_k(1), batch_size=10)
    assert np.array_equal(a.P, b.P) and np.array_equal(a.predictions, b.predictions)


# ---------------------------------------------------------------------------
# checkpoint


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = small_config(epochs=1)
    model = CbdesMoE.from_config(cfg)
    Trainer(model, cfg).fit(generate_dataset(cfg.n_train, cfg.seed))
    path = tmp_path_factory.mktemp("ckpt") / "checkpoint.bin"
    save_checkpoint(path, model, {"model": "moe", "train": cfg.to_dict()})
    return model, cfg, path


def test_round_trip_bit_identical(trained, tmp_path):
    model, cfg, path = trained
    config, arrays = read_checkpoint(path)
    assert config["train"] == cfg.to_dict()
    fresh = CbdesMoE(seed=99)
    load_state(fresh, arrays)
    ref = model.state_arrays()
    got = fresh.state_arrays()
    assert list(ref) == list(got)
    assert all(np.array_equal(ref[k], got[k]) for k in ref)
    again = tmp_path / "again.bin"
    save_checkpoint(again, fresh, config)
    assert again.read_bytes() == path.read_bytes()


def test_running_stats_are_saved(trained):
    model, _, path = trained
    _, arrays = read_checkpoint(path)
    names = [n for n in arrays if n.endswith(".mean")]
    assert names and any(np.any(arrays[n] != 0) for n in names)


def _header_end(data: bytes) -> int:
    """Offset of the payload-length field."""
    pos = 12
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4 + n
    (entries,) = struct.unpack_from("<I", data, pos)
    pos += 4
    for _ in range(entries):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2 + ln
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4 + 4 * ndim
    return pos


def test_payload_bit_flip_detected(trained):
    data = bytearray(trained[2].read_bytes())
    data[_header_end(data) + 8 + 100] ^= 0x01
    with pytest.raises(CheckpointError, match="CRC32"):
        decode(bytes(data))


def test_crc_field_corruption_detected(trained):
    data = bytearray(trained[2].read_bytes())
    data[-1] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC32"):
        decode(bytes(data))


def test_bad_magic(trained):
    data = bytearray(trained[2].read_bytes())
    data[0:8] = b"NOTMOE!!"
    with pytest.raises(CheckpointError, match="magic"):
        decode(bytes(data))


@pytest.mark.parametrize("keep", [0.0, 0.001, 0.5, 0.999])
def test_truncation_detected(trained, keep):
    data = trained[2].read_bytes()
    with pytest.raises(CheckpointError, match="truncated|length"):
        decode(data[: int(len(data) * keep)])


def test_trailing_bytes_detected(trained):
    with pytest.raises(CheckpointError, match="trailing"):
        decode(trained[2].read_bytes() + b"\x00")


def test_shape_mismatch_on_load(trained):
    _, arrays = read_checkpoint(trained[2])
    with pytest.raises(CheckpointError):
        load_state(CbdesMoE(num_experts=3), arrays)


def test_schedule_has_no_wasted_updates():
    for epochs, n_train in ((1, 4), (3, 40)):
        cfg = TrainConfig(n_train=n_train, batch_size=4, epochs=epochs)
        tr = Trainer(CbdesMoE(seed=0), cfg)
        lrs = [tr.lr_at(s) for s in range(cfg.total_steps)]
        assert all(lr > 0 for lr in lrs) and max(lrs) == cfg.lr
