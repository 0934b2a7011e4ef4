import struct
import warnings

import numpy as np
import pytest

from dsrdm.carrier import synth_carrier
from dsrdm.denoiser import (
    CheckpointError,
    MLPPredictor,
    ScheduleMismatch,
    TrainConfig,
    load_checkpoint,
    oracle_predictor,
    read_checkpoint,
    save_checkpoint,
    schedule_fingerprint,
    train_mlp,
)
from dsrdm.harness import heldout_mse, smoothed
from dsrdm.schedule import forward_sample, linear_schedule


class TestOracle:
    def test_recovers_noise(self):
        s = linear_schedule(1000)
        x0 = synth_carrier(8, "gaussian-blob", 1)
        rng = np.random.default_rng(0)
        pred = oracle_predictor(x0, s)
        for t in (1, 10, 500, 1000):
            eps = rng.standard_normal(x0.shape)
            assert np.max(np.abs(pred.predict(forward_sample(x0.data, eps, t, s), t) - eps)) < 1e-12

    def test_clean_input_gives_zero(self):
        s = linear_schedule(100)
        x0 = synth_carrier(8, "checker")
        out = oracle_predictor(x0, s).predict(np.sqrt(s.abar(30)) * x0.data, 30)
        assert np.max(np.abs(out)) < 1e-12

    def test_affine(self):
        s = linear_schedule(100)
        x0 = synth_carrier(8, "gradient")
        pred = oracle_predictor(x0, s)
        a = np.random.default_rng(1).standard_normal(x0.shape)
        d = np.random.default_rng(2).standard_normal(x0.shape)
        diff = pred.predict(a + 0.3 * d, 40) - pred.predict(a, 40)
        np.testing.assert_allclose(diff, 0.3 * d / np.sqrt(1 - s.abar(40)), atol=1e-12)

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            oracle_predictor(synth_carrier(8), linear_schedule(10)).predict(np.zeros((8, 8, 3)), 0)


def micro_net(seed=0):
    """Two inputs, a 2-d embedding and one hidden layer of width 2: 10 weights plus biases."""
    s = linear_schedule(8, 0.05, 0.3)
    return MLPPredictor.init((2,), s, hidden=(2,), emb_dim=2, seed=seed), s


class TestGradient:
    def test_matches_central_differences(self):
        net, s = micro_net()
        for b in net.biases:
            b += np.random.default_rng(9).normal(0, 0.1, b.shape)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 2))
        t = rng.integers(1, s.T + 1, 5)
        target = rng.standard_normal((5, 2))
        _, gws, gbs = net.loss_and_grads(x, t, target)
        params = net.weights + net.biases
        grads = gws + gbs
        assert sum(p.size for p in params) >= 10
        h = 1e-6
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up, _, _ = net.loss_and_grads(x, t, target)
                p[idx] = old - h
                down, _, _ = net.loss_and_grads(x, t, target)
                p[idx] = old
                fd = (up - down) / (2 * h)
                assert abs(g[idx] - fd) <= 1e-4 * max(abs(fd), 1e-6)

    def test_output_finite_on_extreme_input(self):
        net, _ = micro_net()
        out = net.predict(np.array([1e300, -1e300]), 3)
        assert np.isfinite(out).all() and out.shape == (2,)


class TestCheckpoint:
    def test_bitwise_roundtrip(self, tmp_path):
        s = linear_schedule(16, 0.1, 0.1)
        net = MLPPredictor.init((8, 8, 3), s, hidden=(32, 16), emb_dim=8, seed=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(net.to_checkpoint(), path)
        loaded = load_checkpoint(path, s, (8, 8, 3))
        x = np.random.default_rng(0).standard_normal((8, 8, 3))
        for t in (1, 9, 16):
            assert net.predict(x, t).tobytes() == loaded.predict(x, t).tobytes()
        path2 = tmp_path / "m2.ckpt"
        save_checkpoint(loaded.to_checkpoint(), path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_layout(self, tmp_path):
        s = linear_schedule(16, 0.1, 0.1)
        net = MLPPredictor.init((2,), s, hidden=(3,), emb_dim=2, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(net.to_checkpoint(), path)
        raw = path.read_bytes()
        assert raw[:4] == b"DSRD"
        assert struct.unpack_from("<II", raw, 4) == (1, 4)
        assert struct.unpack_from("<II", raw, 12) == (4, 3)
        assert struct.unpack_from("<Q", raw, len(raw) - 8)[0] == schedule_fingerprint(s)

    def test_bad_magic(self, tmp_path):
        s = linear_schedule(16, 0.1, 0.1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(MLPPredictor.init((2,), s, (3,), 2, 0).to_checkpoint(), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_truncated(self, tmp_path):
        s = linear_schedule(16, 0.1, 0.1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(MLPPredictor.init((2,), s, (3,), 2, 0).to_checkpoint(), path)
        path.write_bytes(path.read_bytes()[:-12])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_schedule_guard(self, tmp_path):
        s = linear_schedule(16, 0.1, 0.1)
        other = linear_schedule(16, 0.1, 0.2)
        path = tmp_path / "m.ckpt"
        save_checkpoint(MLPPredictor.init((2,), s, (3,), 2, 0).to_checkpoint(), path)
        with pytest.warns(UserWarning), pytest.raises(ScheduleMismatch):
            load_checkpoint(path, other)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            load_checkpoint(path, other, allow_mismatch=True)
        assert caught


class TestTraining:
    def test_zero_dataset_learns_identity(self):
        s = linear_schedule(50, 1e-3, 0.1)
        zero = [np.zeros((2, 2, 3))]
        res = train_mlp(zero, TrainConfig(hidden=(32,), emb_dim=8, lr=0.02, steps=1500, seed=0), s)
        rng = np.random.default_rng(1)
        errs = []
        for t in range(40, 51):
            eps = rng.standard_normal((2, 2, 3))
            x = np.sqrt(1 - s.abar(t)) * eps
            errs.append(np.mean((res.predictor.predict(x, t) - eps) ** 2))
        assert np.mean(errs) < 0.2

    def test_loss_decreases_and_beats_untrained(self):
        s = linear_schedule(16, 0.1, 0.1)
        data = [synth_carrier(8, p) for p in ("gradient", "checker")]
        cfg = TrainConfig(hidden=(64, 64), emb_dim=16, steps=800, seed=2)
        res = train_mlp(data, cfg, s)
        sm = smoothed(res.losses)
        assert sm[-1] < sm[0]
        fresh = MLPPredictor.init((8, 8, 3), s, cfg.hidden, cfg.emb_dim, seed=2)
        assert heldout_mse(res.predictor, data, s) < heldout_mse(fresh, data, s)

    def test_deterministic(self):
        s = linear_schedule(16, 0.1, 0.1)
        data = [synth_carrier(8, "gradient")]
        cfg = TrainConfig(hidden=(16,), emb_dim=4, steps=50, seed=5)
        a, b = train_mlp(data, cfg, s), train_mlp(data, cfg, s)
        np.testing.assert_array_equal(a.losses, b.losses)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            train_mlp([], TrainConfig(steps=1), linear_schedule(10))
