import csv

import numpy as np
import pytest
import torch

from freqcodec.autoencoder import DESK
from freqcodec.model import FreqCodec
from freqcodec.synth import synth_dataset, synth_sc_patch
from freqcodec.training import (
    LOG_COLUMNS,
    NonFiniteLossError,
    TrainConfig,
    crop_patches,
    desk_train_config,
    rd_loss,
    train_loop,
)


def _flat_run_fraction(img, min_run=8):
    """Share of pixels lying in horizontal runs of >= min_run identical RGB values."""
    total = 0
    for row in img:
        change = np.any(row[1:] != row[:-1], axis=-1)
        bounds = np.concatenate([[0], np.flatnonzero(change) + 1, [len(row)]])
        lengths = np.diff(bounds)
        total += lengths[lengths >= min_run].sum()
    return total / (img.shape[0] * img.shape[1])


class TestRDLoss:
    def test_zero_distortion(self):
        x = torch.rand(1, 3, 8, 8)
        lik = {"y": {"high": torch.full((10,), 0.25)}, "z": {"high": torch.full((6,), 0.5)}}
        t = rd_loss(x, x.clone(), lik, 0.0483)
        assert t.loss.item() == t.rate.item()
        assert t.distortion.item() == 0

    def test_half_likelihoods(self):
        x = torch.zeros(2, 3, 16, 16)
        lik = {"y": {b: torch.full((n,), 0.5) for b, n in zip(("high", "mid", "low"), (40, 20, 4))},
               "z": {b: torch.full((n,), 0.5) for b, n in zip(("high", "mid", "low"), (8, 4, 4))}}
        t = rd_loss(x, x, lik, 0.01)
        assert t.rate.item() == pytest.approx(80 / 512)
        assert t.rates["y_mid"].item() == pytest.approx(20 / 512)

    def test_distortion_scale(self):
        x = torch.zeros(1, 3, 4, 4)
        t = rd_loss(x, x + 0.1, {"y": {"high": torch.ones(1)}}, 2.0)
        assert t.distortion.item() == pytest.approx(255**2 * 0.01)
        assert t.loss.item() == pytest.approx(2.0 * 255**2 * 0.01)

    def test_non_finite(self):
        x = torch.zeros(1, 3, 4, 4)
        with pytest.raises(NonFiniteLossError, match="y_high"):
            rd_loss(x, x, {"y": {"high": torch.zeros(3)}}, 0.01)

    def test_gradient_integrity(self):
        torch.manual_seed(0)
        model = FreqCodec(DESK, 0.0483).double()
        x = torch.rand(1, 3, 64, 64, dtype=torch.float64)

        def loss():
            out = model(x, torch.Generator().manual_seed(1))
            return rd_loss(x, out.x_hat, out.likelihoods, 0.0483).loss

        loss().backward()
        rng = np.random.default_rng(0)
        params = [p for p in model.parameters()]
        for _ in range(10):
            p = params[rng.integers(len(params))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = p.grad[idx].item()
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + 1e-5
                up = loss().item()
                p[idx] = orig - 1e-5
                down = loss().item()
                p[idx] = orig
            num = (up - down) / 2e-5
            assert abs(analytic - num) <= 1e-3 * max(abs(num), abs(analytic), 1e-6)


class TestCrop:
    def test_large_image(self):
        img = np.random.default_rng(0).random((720, 1280, 3))
        assert crop_patches(img, 256, np.random.default_rng(1)).shape == (256, 256, 3)

    def test_exact_size_identity(self):
        img = np.random.default_rng(0).random((256, 256, 3))
        assert np.array_equal(crop_patches(img, 256, np.random.default_rng(1)), img)

    def test_small_image_padded(self):
        img = np.random.default_rng(0).random((100, 300, 3))
        c = crop_patches(img, 256, np.random.default_rng(2))
        assert c.shape == (256, 256, 3)

    def test_seeded(self):
        img = np.random.default_rng(0).random((500, 500, 3))
        a = crop_patches(img, 64, np.random.default_rng(5))
        b = crop_patches(img, 64, np.random.default_rng(5))
        assert np.array_equal(a, b)


class TestSynth:
    def test_flat_runs(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert _flat_run_fraction(synth_sc_patch(rng, 256)) >= 0.2

    def test_range_and_seed(self):
        a = synth_dataset(3, 128, seed=4)
        b = synth_dataset(3, 128, seed=4)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert all(x.min() >= 0 and x.max() <= 1 and x.shape == (128, 128, 3) for x in a)
        assert not np.array_equal(a[0], a[1])


class TestSchedule:
    def test_lr_switch(self):
        cfg = TrainConfig()
        assert cfg.lr_at(299) == 1e-4
        assert cfg.lr_at(300) == pytest.approx(1e-5)

    def test_desk_recipe(self):
        cfg = desk_train_config(epochs=20)
        assert cfg.lr_at(14) == 1e-3 and cfg.lr_at(15) == pytest.approx(1e-4)

    def test_validate(self):
        with pytest.raises(ValueError):
            TrainConfig(crop_size=100).validate(64)
        with pytest.raises(ValueError):
            TrainConfig(metric="ssim").validate(64)


class TestTrainLoop:
    def _cfg(self, **kw):
        base = dict(lmbda=0.0483, lr=1e-3, lr_drop_epoch=1, epochs=2, batch_size=2, crop_size=64, seed=3)
        base.update(kw)
        return TrainConfig(**base)

    def test_deterministic_log(self, tmp_path):
        data = synth_dataset(4, 96, seed=1)
        train_loop(data, self._cfg(), DESK, log_path=tmp_path / "a.csv")
        train_loop(data, self._cfg(), DESK, log_path=tmp_path / "b.csv")
        a = (tmp_path / "a.csv").read_text()
        assert a == (tmp_path / "b.csv").read_text()
        rows = list(csv.reader(a.splitlines()))
        assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 3
        assert float(rows[1][-1]) == 1e-3 and float(rows[2][-1]) == pytest.approx(1e-4)

    def test_history_and_eval_mode(self):
        r = train_loop(synth_dataset(2, 64, seed=2), self._cfg(epochs=1), DESK)
        assert not r.model.training and r.skipped_steps == 0
        h = r.history[0]
        assert h["R_bpp"] == pytest.approx(sum(h[k] for k in ("R_yH", "R_yM", "R_yL", "R_zH", "R_zM", "R_zL")))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_loop([], self._cfg(), DESK)

    def test_non_finite_gradients_skipped_then_abort(self):
        torch.manual_seed(0)
        model = FreqCodec(DESK, 0.0483)
        # NaN gradients in one parameter make every step non-finite
        model.g_s.conv_out.paths["h2h"].bias.register_hook(lambda g: g * float("nan"))
        with pytest.raises(NonFiniteLossError, match="consecutive"):
            train_loop(synth_dataset(2, 64), self._cfg(epochs=30, batch_size=1, max_skips=3), DESK, model=model)
