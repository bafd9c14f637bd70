import pytest
import torch

from freqcodec.autoencoder import DESK, PRESETS, Analysis, HyperCodec, ModelConfig, Synthesis, pad_image
from freqcodec.freq_blocks import ContractError, FrequencyTriple
from freqcodec.model import FreqCodec


def _latent(cfg, side, seed=0):
    g = torch.Generator().manual_seed(seed)
    s = side // 2**cfg.main_stages
    return FrequencyTriple(*(torch.randn(1, c, s >> b, s >> b, generator=g) for b, c in enumerate(cfg.latent_counts)))


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.latent_counts == (64, 64, 64)
        assert cfg.granularity == 256

    def test_desk(self):
        assert DESK.latent_counts == (32, 32, 32) and DESK.granularity == 64
        assert PRESETS["high"].latent_counts == (108, 106, 106)

    def test_round_trip_dict(self):
        assert ModelConfig.from_dict(DESK.to_dict()) == DESK

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelConfig(N=2, M=2)
        with pytest.raises(ValueError):
            ModelConfig(main_stages=1)


class TestPadding:
    def test_replicate_bottom_right(self):
        x = torch.arange(6.0).view(1, 1, 2, 3)
        p = pad_image(x, 4)
        assert p.shape == (1, 1, 4, 4)
        assert p[0, 0, :2, :3].equal(x[0, 0])
        assert p[0, 0, 3].tolist() == [3, 4, 5, 5]

    def test_aligned_untouched(self):
        x = torch.rand(1, 3, 64, 64)
        assert pad_image(x, 64) is x


class TestTransforms:
    @pytest.mark.parametrize("side", [256, 512])
    def test_analysis_shapes_default(self, side):
        cfg = ModelConfig()
        with torch.no_grad():
            y = Analysis(cfg)(torch.rand(1, 3, side, side))
        s = side // 16
        assert y.shapes == ((1, 64, s, s), (1, 64, s // 2, s // 2), (1, 64, s // 4, s // 4))

    @pytest.mark.parametrize("side", [256, 512])
    def test_desk_shapes(self, side):
        torch.manual_seed(0)
        g_a, g_s = Analysis(DESK), Synthesis(DESK)
        with torch.no_grad():
            y = g_a(torch.rand(1, 3, side, side))
            s = side // 8
            assert y.shapes == ((1, 32, s, s), (1, 32, s // 2, s // 2), (1, 32, s // 4, s // 4))
            assert g_s(y).shape == (1, 3, side, side)

    def test_synthesis_default_shape(self):
        cfg = ModelConfig()
        with torch.no_grad():
            assert Synthesis(cfg)(_latent(cfg, 256)).shape == (1, 3, 256, 256)

    def test_unpadded_rejected(self):
        with pytest.raises(ContractError):
            Analysis(DESK)(torch.rand(1, 3, 96, 64))

    def test_deterministic(self):
        torch.manual_seed(0)
        g_a = Analysis(DESK).eval()
        x = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            a, b = g_a(x), g_a(x)
        assert all(torch.equal(s, t) for s, t in zip(a, b))

    def test_synthesis_range(self):
        torch.manual_seed(1)
        g_s = Synthesis(DESK)
        with torch.no_grad():
            y = _latent(DESK, 128, seed=1).map(lambda t: t * 50)
            x = g_s(y)
            assert x.min() >= 0 and x.max() <= 1
            assert g_s(y, clamp=False).abs().max() > 1

    def test_constant_latent_gives_finite_image(self):
        torch.manual_seed(2)
        with torch.no_grad():
            x = Synthesis(DESK)(_latent(DESK, 128).map(torch.zeros_like))
        assert torch.isfinite(x).all()


class TestHyper:
    def test_shapes(self):
        torch.manual_seed(0)
        h = HyperCodec(DESK)
        y = _latent(DESK, 256)
        z = h.analyze(y)
        assert z.shapes == ((1, 32, 16, 16), (1, 32, 8, 8), (1, 32, 4, 4))
        psi = h.synthesize(z)
        assert psi.shapes == ((1, 192, 32, 32), (1, 192, 16, 16), (1, 192, 8, 8))

    def test_sign_invariant(self):
        torch.manual_seed(0)
        h = HyperCodec(DESK)
        y = _latent(DESK, 128)
        a, b = h.analyze(y), h.analyze(y.map(torch.neg))
        assert all(torch.equal(s, t) for s, t in zip(a, b))


class TestGradientFlow:
    def test_all_parameters_receive_gradient(self):
        torch.manual_seed(0)
        model = FreqCodec(DESK, 0.0483)
        out = model(torch.rand(1, 3, 64, 64), torch.Generator().manual_seed(0))
        rate = sum(-torch.log2(p).sum() for d in out.likelihoods.values() for p in d.values())
        loss = rate + (out.x_hat - 0.5).pow(2).sum()
        loss.backward()
        missing = [n for n, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
        assert missing == []
