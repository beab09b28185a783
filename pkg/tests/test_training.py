"""Tests for the optimizer, training loop, prediction and checkpoints."""

import struct
import zlib

import numpy as np
import pytest

from capslid import model as M
from capslid import training as T
from capslid.errors import (
    CheckpointError,
    ChecksumMismatch,
    EmptyDataset,
    LabelOutOfRange,
    ShapeMismatch,
    VersionMismatch,
)

SMALL = M.ModelConfig(conv1_channels=8, primary_banks=4, mid_caps=8, lang_dim=8, decoder_hidden=(16, 32))


def toy_data(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 32, 25)), np.arange(n) % 5


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = {"a": np.array([1.0, -2.0])}
        new, _ = T.adam_step(p, {"a": np.zeros(2)}, T.AdamMoments.zeros_like(p), T.TrainConfig(), 1)
        np.testing.assert_array_equal(new["a"], p["a"])

    def test_first_step_is_sign(self):
        p = {"a": np.zeros(4)}
        g = {"a": np.array([3.0, -0.5, 100.0, -1e-2])}
        cfg = T.TrainConfig(learning_rate=0.01)
        new, _ = T.adam_step(p, g, T.AdamMoments.zeros_like(p), cfg, 1)
        np.testing.assert_allclose(new["a"], -0.01 * np.sign(g["a"]), rtol=1e-5)

    def test_scalar_recurrence(self):
        cfg = T.TrainConfig(learning_rate=0.05)
        p = {"a": np.array([2.0])}
        mom = T.AdamMoments.zeros_like(p)
        x, m, v = 2.0, 0.0, 0.0
        for t in range(1, 6):
            g = 2 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            p, mom = T.adam_step(p, {"a": 2 * p["a"]}, mom, cfg, t)
            assert p["a"][0] == pytest.approx(x, abs=1e-15)

    def test_quadratic_decreases(self):
        cfg = T.TrainConfig(learning_rate=0.1)
        p = {"a": np.array([3.0])}
        mom = T.AdamMoments.zeros_like(p)
        losses = [float(p["a"][0] ** 2)]
        for t in range(1, 11):
            p, mom = T.adam_step(p, {"a": 2 * p["a"]}, mom, cfg, t)
            losses.append(float(p["a"][0] ** 2))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_shape_mismatch(self):
        p = {"a": np.zeros(3)}
        with pytest.raises(ShapeMismatch):
            T.adam_step(p, {"a": np.zeros(4)}, T.AdamMoments.zeros_like(p), T.TrainConfig(), 1)

    def test_bad_step(self):
        p = {"a": np.zeros(1)}
        with pytest.raises(ValueError):
            T.adam_step(p, p, T.AdamMoments.zeros_like(p), T.TrainConfig(), 0)


class TestClipping:
    def test_scales_to_max(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        out, total = T.clip_by_global_norm(g, 1.0)
        assert total == 5.0
        assert out["a"][0] == pytest.approx(0.6) and out["b"][0] == pytest.approx(0.8)

    def test_small_untouched(self):
        g = {"a": np.array([0.3])}
        assert T.clip_by_global_norm(g, 1.0)[0]["a"] is g["a"]


class TestConfig:
    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"learning_rate": -1.0}, {"beta1": 1.0}, {"workers": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            T.TrainConfig(**kw)


class TestBatchGradients:
    def test_worker_count_irrelevant(self):
        x, y = toy_data(19)
        p = M.init_params(SMALL, 0)
        a = T.batch_gradients(p, x, y, SMALL, M.MarginLossConfig(), workers=1)
        b = T.batch_gradients(p, x, y, SMALL, M.MarginLossConfig(), workers=4)
        assert a.loss == b.loss
        for k in p:
            assert a.grads[k].tobytes() == b.grads[k].tobytes()

    def test_matches_single_graph(self):
        x, y = toy_data(12)
        p = M.init_params(SMALL, 1)
        res = T.batch_gradients(p, x, y, SMALL, M.MarginLossConfig())
        lg = M.build_loss(p, x, y, SMALL)
        assert res.loss == pytest.approx(float(lg.loss.value), rel=1e-12)


class TestTrain:
    def test_single_example_overfit(self):
        x, y = toy_data(1)
        res = T.train(x, y, T.TrainConfig(batch_size=1, epochs=200), SMALL)
        losses = [s.mean_loss for s in res.stats]
        assert all(b < a for a, b in zip(losses[10:], losses[11:]))
        out = M.forward(res.params, x, SMALL)
        assert int(np.argmax(out.norms[0])) == y[0]
        assert M.margin_loss(out.norms[0], int(y[0])) < 1e-3

    def test_deterministic(self):
        x, y = toy_data(12)
        cfg = T.TrainConfig(batch_size=4, epochs=3, seed=7)
        a = T.train(x, y, cfg, SMALL)
        b = T.train(x, y, cfg, SMALL)
        assert [s.mean_loss for s in a.stats] == [s.mean_loss for s in b.stats]
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_seed_matters(self):
        x, y = toy_data(8)
        a = T.train(x, y, T.TrainConfig(batch_size=4, epochs=1, seed=1), SMALL)
        b = T.train(x, y, T.TrainConfig(batch_size=4, epochs=1, seed=2), SMALL)
        assert a.stats[0].mean_loss != b.stats[0].mean_loss

    def test_stats_and_callback(self):
        x, y = toy_data(6)
        seen = []
        res = T.train(x, y, T.TrainConfig(batch_size=4, epochs=2), SMALL, on_epoch=seen.append)
        assert [s.epoch for s in seen] == [1, 2]
        assert res.step == 4
        assert all(0 <= s.train_acc <= 1 for s in seen)

    def test_params_snapped(self):
        x, y = toy_data(4)
        res = T.train(x, y, T.TrainConfig(batch_size=4, epochs=1), SMALL)
        for v in res.params.values():
            np.testing.assert_array_equal(v, v.astype(np.float32))

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            T.train(np.zeros((0, 32, 25)), np.zeros(0, dtype=int), T.TrainConfig(), SMALL)

    def test_bad_label(self):
        with pytest.raises(LabelOutOfRange):
            T.train(np.zeros((2, 32, 25)), np.array([0, 5]), T.TrainConfig(), SMALL)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts(self):
        from capslid.errors import NonFiniteLoss

        x, y = toy_data(2)
        p = M.init_params(SMALL, 0)
        p["lang.w"] = p["lang.w"] * np.inf
        with pytest.raises(NonFiniteLoss, match="epoch 1"):
            T.train(x, y, T.TrainConfig(batch_size=2, epochs=1), SMALL, params=p)


class TestPredict:
    def test_argmax(self):
        assert T.prediction_from_norms([0.1, 0.8, 0.2, 0.1, 0.1]).label == 1

    def test_tie_lowest_index(self):
        assert T.prediction_from_norms([0.5, 0.5, 0.1, 0.1, 0.1]).label == 0

    def test_predict_single(self):
        p = M.init_params(SMALL, 0)
        pred = T.predict(p, toy_data(1)[0][0], SMALL)
        assert len(pred.norms) == 5 and pred.label == int(np.argmax(pred.norms))
        assert pred.to_dict() == {"label": pred.label, "norms": pred.norms, "non_class": False}

    def test_predict_rejects_batch(self):
        with pytest.raises(ShapeMismatch):
            T.predict(M.init_params(SMALL, 0), toy_data(2)[0], SMALL)

    def test_norms_batching(self):
        x, _ = toy_data(5)
        p = M.init_params(SMALL, 0)
        np.testing.assert_allclose(
            T.predict_norms(p, x, SMALL, batch_size=2), M.forward(p, x, SMALL).norms, atol=1e-13
        )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    x, y = toy_data(8)
    return T.train(x, y, T.TrainConfig(batch_size=4, epochs=1), SMALL), x


def make_ckpt(res):
    return T.Checkpoint(
        res.params, SMALL, T.TrainConfig(batch_size=4, epochs=1), res.step, res.moments,
        thresholds={"tau": [0.5] * 5, "counts": [1] * 5},
    )


class TestCheckpoint:
    def test_round_trip_bit_exact(self, trained, tmp_path):
        res, x = trained
        T.save_checkpoint(tmp_path / "m.clid", make_ckpt(res))
        back = T.load_checkpoint(tmp_path / "m.clid")
        for k, v in res.params.items():
            assert back.params[k].tobytes() == v.tobytes()
        assert back.model_config == SMALL
        assert back.step == res.step
        assert back.thresholds == {"tau": [0.5] * 5, "counts": [1] * 5}
        assert back.frontend == {"clip_seconds": 5, "n_bins": 64, "pps": 10}
        a = M.forward(res.params, x, SMALL)
        b = M.forward(back.params, x, SMALL)
        assert a.norms.tobytes() == b.norms.tobytes()
        assert a.lang_vectors.tobytes() == b.lang_vectors.tobytes()

    def test_prediction_survives(self, trained, tmp_path):
        res, x = trained
        T.save_checkpoint(tmp_path / "m.clid", make_ckpt(res))
        back = T.load_checkpoint(tmp_path / "m.clid")
        assert T.predict(back.params, x[0], SMALL) == T.predict(res.params, x[0], SMALL)

    def test_layout(self, trained):
        res, _ = trained
        data = T.encode_checkpoint(make_ckpt(res))
        assert data[:4] == b"CLID"
        assert struct.unpack_from("<IQI", data, 4) == (1, res.step, 3 * len(res.params))
        (name_len,) = struct.unpack_from("<I", data, 20)
        assert data[24 : 24 + name_len] == b"conv1.b"
        assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])

    def test_corrupt_byte(self, trained):
        data = bytearray(T.encode_checkpoint(make_ckpt(trained[0])))
        data[100] ^= 0x01
        with pytest.raises(ChecksumMismatch):
            T.decode_checkpoint(bytes(data))

    def test_future_version(self, trained):
        data = bytearray(T.encode_checkpoint(make_ckpt(trained[0])))
        data[4:8] = struct.pack("<I", 2)
        data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])))
        with pytest.raises(VersionMismatch):
            T.decode_checkpoint(bytes(data))

    def test_not_a_checkpoint(self):
        with pytest.raises(CheckpointError):
            T.decode_checkpoint(b"PK\x03\x04" + bytes(40))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            T.load_checkpoint(tmp_path / "absent.clid")

    def test_without_moments(self, trained):
        res, _ = trained
        ckpt = T.Checkpoint(res.params, SMALL)
        back = T.decode_checkpoint(T.encode_checkpoint(ckpt))
        assert back.moments is None and back.thresholds is None
