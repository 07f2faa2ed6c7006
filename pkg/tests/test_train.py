import json

import numpy as np
import pytest

from mpcaps.data import Dataset
from mpcaps.errors import ChecksumError, FormatError, InvalidArgument, NumericFailure
from mpcaps.network import Network
from mpcaps.numerics import Rng
from mpcaps.train import (
    CHECKPOINT_MAGIC,
    TrainConfig,
    checkpoint_bytes,
    confusion_matrix,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)


@pytest.fixture
def tiny_data():
    r = np.random.default_rng(0)
    return Dataset(r.uniform(size=(10, 1, 9, 9)).astype(np.float32), np.arange(10) % 2, 2)


@pytest.fixture
def trained(tiny_config, tiny_data):
    return train(tiny_config, tiny_data, TrainConfig(epochs=60, lr=0.01, batch_size=10, sigma=0.5))


def test_lr_zero_keeps_initialization(tiny_config, tiny_data):
    cfg = TrainConfig(epochs=1, lr=0.0, batch_size=4, seed=3)
    ckpt, _ = train(tiny_config, tiny_data, cfg)
    init = Network.init(tiny_config, Rng(3).spawn(1), cfg.sigma, np.float32)
    for name, p in init.params.items():
        assert np.array_equal(ckpt.params[name], p)


def test_memorizes_ten_samples(trained, tiny_data):
    ckpt, report = trained
    acc, cm = evaluate(ckpt, tiny_data)
    assert acc == 1.0
    assert report.final_accuracy == 1.0
    assert report.epochs[-1]["train_loss"] < report.epochs[0]["train_loss"]


def test_untrained_is_chance(tiny_config):
    r = np.random.default_rng(1)
    data = Dataset(r.uniform(size=(200, 1, 9, 9)).astype(np.float32), np.arange(200) % 2, 2)
    net = Network.init(tiny_config, Rng(11))
    acc, cm = evaluate(net, data)
    # 99% binomial bound for n = 200
    assert abs(acc - 0.5) <= 2.576 * np.sqrt(0.25 / 200)
    assert list(cm.sum(axis=1)) == [100, 100]


def test_confusion_rows_sum_to_class_counts():
    cm = confusion_matrix([0, 1, 1, 2, 0], [0, 0, 1, 2, 2], 3)
    assert list(cm.sum(axis=1)) == [2, 1, 2]
    assert cm[0, 1] == 1 and cm[2, 0] == 1


def test_evaluate_class_mismatch(tiny_config):
    net = Network.init(tiny_config, Rng(0))
    data = Dataset(np.zeros((3, 1, 9, 9), dtype=np.float32), [0, 1, 2], 3)
    with pytest.raises(InvalidArgument):
        evaluate(net, data)


def test_training_is_deterministic(tiny_config, tiny_data):
    cfg = TrainConfig(epochs=3, lr=0.01, batch_size=4, seed=9)
    a, ra = train(tiny_config, tiny_data, cfg)
    b, rb = train(tiny_config, tiny_data, cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert ra.to_jsonl() == rb.to_jsonl()
    c, _ = train(tiny_config, tiny_data, TrainConfig(epochs=3, lr=0.01, batch_size=4, seed=10))
    assert checkpoint_bytes(a) != checkpoint_bytes(c)


def test_report_records(trained):
    _, report = trained
    lines = [json.loads(line) for line in report.to_jsonl().splitlines()]
    assert len(lines) == 61
    assert lines[-1]["kind"] == "summary"
    assert all(0.0 <= r["train_accuracy"] <= 1.0 for r in lines[:-1])
    assert "wall_time" not in report.to_jsonl()
    assert len(report.timing_jsonl().splitlines()) == 60


def test_keep_best_uses_held_out(tiny_config, tiny_data):
    cfg = TrainConfig(epochs=4, lr=0.01, batch_size=5, sigma=0.5, keep_best=True)
    ckpt, report = train(tiny_config, tiny_data, cfg, eval_data=tiny_data)
    accs = [e["test_accuracy"] for e in report.epochs]
    assert report.best_epoch == int(np.argmax(accs)) + 1
    assert ckpt.epoch == report.best_epoch


def test_non_finite_loss_aborts(tiny_config, tiny_data):
    bad = Dataset(np.full((2, 1, 9, 9), np.nan, dtype=np.float32), [0, 1], 2)
    with pytest.raises(NumericFailure, match="epoch 1, batch 0"):
        train(tiny_config, bad, TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(InvalidArgument):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidArgument):
        TrainConfig(dtype="float16")


# --- checkpoints ---------------------------------------------------------------------

def test_checkpoint_round_trip(trained, tmp_path, tiny_data):
    ckpt, _ = trained
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    for name, p in ckpt.params.items():
        assert back.params[name].tobytes() == p.tobytes()
        assert back.params[name].dtype == p.dtype
    for name, s in ckpt.optimizer.items():
        assert np.array_equal(back.optimizer[name].m, s.m)
        assert back.optimizer[name].step == s.step
    assert back.network == ckpt.network
    assert back.rng_state == ckpt.rng_state
    assert evaluate(back, tiny_data)[0] == evaluate(ckpt, tiny_data)[0]
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_truncated(trained, tmp_path):
    raw = checkpoint_bytes(trained[0])
    (tmp_path / "t").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "t")


def test_checkpoint_corrupted(trained, tmp_path):
    raw = bytearray(checkpoint_bytes(trained[0]))
    raw[-100] ^= 0xFF
    (tmp_path / "c").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "c")


def test_checkpoint_version_and_magic(trained, tmp_path):
    raw = bytearray(checkpoint_bytes(trained[0]))
    raw[4] = 99
    (tmp_path / "v").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "v")
    (tmp_path / "m").write_bytes(b"JUNK" + bytes(raw[4:]))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m")
    assert bytes(raw[:4]) == CHECKPOINT_MAGIC
