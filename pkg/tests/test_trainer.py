import math
import os

import numpy as np
import pytest

from lunar_restore.errors import CorruptCheckpointError, NonFiniteLossError, ValidationError
from lunar_restore.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    checkpoint_id,
    epoch_permutation,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_arrays,
)
from lunar_restore.unet import UNetConfig

SMALL = UNetConfig(depth=1, base_channels=2)


def scalar_adam(theta, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    # textbook recurrence on plain floats
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def toy_data(n=4, size=8, seed=0):
    rng = np.random.default_rng(seed)
    Y = rng.random((n, 1, size, size))
    X = Y.copy()
    X[..., 3] = 0.0
    M = np.zeros_like(X, dtype=bool)
    M[..., 3] = True
    return X, Y, M


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # bias correction makes the first step exactly lr * g/|g| up to eps
        p = {"w": np.array([1.0, -3.0])}
        s = AdamState.zeros_like(p)
        new, s2 = adam_step(p, {"w": 2 * p["w"]}, s, TrainConfig(learning_rate=0.01))
        np.testing.assert_allclose(new["w"], [0.99, -2.99], atol=1e-8)
        assert s2.step == 1 and s.step == 0
        assert p["w"][0] == 1.0

    @pytest.mark.parametrize("steps", [1, 10, 500])
    def test_quadratic_matches_scalar_oracle(self, steps):
        cfg = TrainConfig(learning_rate=0.05)
        p = {"w": np.array([1.5])}
        s = AdamState.zeros_like(p)
        for _ in range(steps):
            p, s = adam_step(p, {"w": 2 * p["w"]}, s, cfg)
        assert p["w"][0] == pytest.approx(scalar_adam(1.5, lambda x: 2 * x, steps, lr=0.05), rel=1e-12, abs=1e-15)

    def test_converges_on_quadratic(self):
        cfg = TrainConfig(learning_rate=0.05)
        p = {"w": np.array([1.5])}
        s = AdamState.zeros_like(p)
        for _ in range(2000):
            p, s = adam_step(p, {"w": 2 * p["w"]}, s, cfg)
        assert abs(p["w"][0]) < 1e-2

    def test_explicit_step(self):
        p = {"w": np.zeros(1)}
        with pytest.raises(ValidationError):
            adam_step(p, {"w": np.ones(1)}, AdamState.zeros_like(p), TrainConfig(), t=0)

    def test_shape_mismatch(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(ValidationError):
            adam_step(p, {"w": np.ones(3)}, AdamState.zeros_like(p), TrainConfig())


class TestConfig:
    @pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"beta1": 1.0}, {"batch_size": 0}, {"dtype": "float16"}, {"seed": -1}])
    def test_rejects(self, kw):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)


class TestCheckpoint:
    def _trained(self, epochs=2):
        X, Y, _ = toy_data()
        return train_arrays(X, Y, SMALL, TrainConfig(epochs=epochs, batch_size=2, seed=3))

    def test_round_trip(self, tmp_path):
        ck = self._trained()
        path = str(tmp_path / "m.lruc")
        save_checkpoint(ck, path)
        back = load_checkpoint(path)
        assert back.unet_config == ck.unet_config and back.train_config == ck.train_config
        assert back.epoch == 2 and back.adam.step == ck.adam.step
        assert back.loss_history == ck.loss_history
        for k in ck.params:
            assert back.params[k].tobytes() == ck.params[k].tobytes()
            assert back.adam.m[k].tobytes() == ck.adam.m[k].tobytes()
            assert back.adam.v[k].tobytes() == ck.adam.v[k].tobytes()

    def test_byte_stable(self, tmp_path):
        ck = self._trained()
        save_checkpoint(ck, tmp_path / "a.lruc")
        save_checkpoint(load_checkpoint(tmp_path / "a.lruc"), tmp_path / "b.lruc")
        assert checkpoint_id(tmp_path / "a.lruc") == checkpoint_id(tmp_path / "b.lruc")

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.lruc"
        save_checkpoint(self._trained(1), path)
        data = path.read_bytes()
        path.write_bytes(data[:-9])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.lruc"
        save_checkpoint(self._trained(1), path)
        data = bytearray(path.read_bytes())
        data[0:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "nope.lruc")


class TestTraining:
    def test_deterministic(self):
        X, Y, _ = toy_data()
        cfg = TrainConfig(epochs=3, batch_size=2, seed=9)
        a, b = train_arrays(X, Y, SMALL, cfg), train_arrays(X, Y, SMALL, cfg)
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)

    def test_resume_equivalent(self, tmp_path):
        X, Y, _ = toy_data(n=5)
        full = train_arrays(X, Y, SMALL, TrainConfig(epochs=4, batch_size=2, seed=1))
        half = train_arrays(X, Y, SMALL, TrainConfig(epochs=2, batch_size=2, seed=1))
        save_checkpoint(half, tmp_path / "half.lruc")
        resumed = train_arrays(
            X, Y, SMALL, TrainConfig(epochs=4, batch_size=2, seed=1), resume=load_checkpoint(tmp_path / "half.lruc")
        )
        assert resumed.epoch == 4 and resumed.adam.step == full.adam.step
        assert all(resumed.params[k].tobytes() == full.params[k].tobytes() for k in full.params)
        assert resumed.loss_history == full.loss_history

    def test_loss_decreases(self):
        X, Y, _ = toy_data()
        ck = train_arrays(X, Y, SMALL, TrainConfig(epochs=30, batch_size=2, learning_rate=1e-2))
        hist = [r["train_loss"] for r in ck.loss_history]
        assert hist[-1] < hist[0]

    def test_non_finite_loss(self):
        X, Y, _ = toy_data()
        Y[1, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLossError) as e:
            train_arrays(X, Y, SMALL, TrainConfig(epochs=1, batch_size=4))
        assert e.value.epoch == 1 and e.value.batch == 0

    def test_masked_requires_masks(self):
        X, Y, _ = toy_data()
        with pytest.raises(ValidationError):
            train_arrays(X, Y, SMALL, TrainConfig(masked_loss=True))

    def test_config_mismatch_on_resume(self):
        X, Y, _ = toy_data()
        ck = train_arrays(X, Y, SMALL, TrainConfig(epochs=1))
        with pytest.raises(ValidationError):
            train_arrays(X, Y, UNetConfig(depth=1, base_channels=4), TrainConfig(epochs=2), resume=ck)

    def test_val_loss_at_checkpoints(self):
        X, Y, M = toy_data()
        ck = train_arrays(X, Y, SMALL, TrainConfig(epochs=4, checkpoint_every=2), val=(X, Y))
        assert [r["val_loss"] is not None for r in ck.loss_history] == [False, True, False, True]

    def test_epoch_permutation(self):
        a = epoch_permutation(1, 1, 10)
        assert sorted(a) == list(range(10))
        assert np.array_equal(a, epoch_permutation(1, 1, 10))
        assert not np.array_equal(a, epoch_permutation(1, 2, 10))


def test_fit_writes_outputs(tmp_path, small_dataset):
    cfg = TrainConfig(epochs=2, batch_size=3, checkpoint_every=1)
    ck = fit(small_dataset, UNetConfig(depth=1, base_channels=2), cfg, str(tmp_path / "run"))
    assert sorted(os.listdir(tmp_path / "run" / "checkpoints")) == ["epoch_0001.lruc", "epoch_0002.lruc"]
    lines = (tmp_path / "run" / "losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 3
    assert load_checkpoint(tmp_path / "run" / "model.lruc").epoch == ck.epoch == 2
