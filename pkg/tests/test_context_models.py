import numpy as np
import pytest
import torch

from freqcodec.context_models import (
    CONTEXT_CASES,
    ContextModel,
    CrossContext,
    EntropyParameters,
    IntraContext,
    anchor_mask,
)
from freqcodec.entropy_models import SIGMA_MIN
from freqcodec.freq_blocks import ContractError

import oracles as O

COUNTS = (4, 3, 2)
PSI = 6
CTX = 3
SIZES = (16, 8, 4)


def _model(case=3, seed=0):
    torch.manual_seed(seed)
    m = ContextModel(COUNTS, PSI, CTX, case=case).double()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.2)
    return m


def _inputs(seed=0, batch=1):
    g = torch.Generator().manual_seed(seed)
    y = tuple(torch.randn(batch, c, s, s, generator=g, dtype=torch.float64) for c, s in zip(COUNTS, SIZES))
    psi = tuple(torch.randn(batch, PSI, s, s, generator=g, dtype=torch.float64) for s in SIZES)
    return y, psi


class TestAnchorMask:
    def test_pattern(self):
        m = anchor_mask(3, 4)[0, 0]
        assert m.tolist() == [[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]]

    def test_half_coverage(self):
        assert anchor_mask(8, 8).sum().item() == 32


class TestIntraContext:
    def test_stage_one_is_zero(self):
        c = IntraContext(4, 6)
        y = torch.randn(1, 4, 8, 8)
        assert torch.count_nonzero(c(y, stage=1)) == 0
        z = c(None, stage=1, shape=(2, 8, 8))
        assert z.shape == (2, 6, 8, 8) and torch.count_nonzero(z) == 0

    def test_stage_two_needs_anchors(self):
        with pytest.raises(ContractError):
            IntraContext(4, 6)(None, stage=2)

    def test_zero_at_anchors_and_reads_only_anchors(self):
        torch.manual_seed(0)
        c = IntraContext(3, 5).double()
        y = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        mask = anchor_mask(8, 8, y)
        out = c(y)
        assert torch.count_nonzero(out * mask) == 0
        y2 = y + torch.randn_like(y) * (1 - mask)
        torch.testing.assert_close(c(y2), out, atol=0, rtol=0)

    def test_matches_masked_conv_oracle(self):
        torch.manual_seed(1)
        c = IntraContext(2, 3).double()
        y = torch.randn(1, 2, 6, 6, dtype=torch.float64)
        mask = O.npy(anchor_mask(6, 6))[0, 0]
        ref = O.apply_conv(c.conv, O.npy(y[0]) * mask) * (1 - mask)
        np.testing.assert_allclose(O.npy(c(y)[0]), ref, atol=1e-12)


class TestCrossContext:
    def test_shapes(self):
        assert CrossContext(4, 6, 2)(torch.randn(1, 4, 16, 16)).shape == (1, 6, 4, 4)
        assert CrossContext(4, 6, 1)(torch.randn(1, 4, 16, 16)).shape == (1, 6, 8, 8)

    def test_zero_in_zero_out(self):
        c = CrossContext(4, 6, 2)
        with torch.no_grad():
            for name, p in c.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
        assert torch.count_nonzero(c(torch.zeros(1, 4, 16, 16))) == 0

    def test_target_check(self):
        with pytest.raises(ContractError):
            CrossContext(4, 6, 2)(torch.randn(1, 4, 16, 16), target_hw=(8, 8))

    def test_gradients(self):
        torch.manual_seed(2)
        c = CrossContext(2, 2, 1).double()
        x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        w = torch.randn(1, 2, 2, 2, dtype=torch.float64)
        loss = lambda: (c(x) * w).sum()
        loss().backward()
        for t in [x] + list(c.parameters()):
            num = O.central_difference(lambda: loss().detach(), t.data)
            assert O.rel_err(t.grad, num) < 1e-4


class TestEntropyParameters:
    def test_hidden_widths(self):
        e = EntropyParameters(12, 4)
        assert (e.conv1.out_channels, e.conv2.out_channels, e.conv3.out_channels) == (8, 4, 8)

    def test_sigma_floor(self):
        e = EntropyParameters(6, 3)
        with torch.no_grad():
            e.conv3.bias.fill_(-100.0)
        _, sigma = e(torch.zeros(1, 6, 4, 4))
        assert torch.all(sigma >= SIGMA_MIN)

    def test_mismatch(self):
        e = EntropyParameters(6, 3)
        with pytest.raises(ContractError):
            e(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 2, 2))
        with pytest.raises(ContractError):
            e(torch.zeros(1, 5, 4, 4))


class TestContextModel:
    def test_output_shapes(self):
        m = _model()
        mus, sigmas = m(*_inputs())
        for mu, s, c, sz in zip(mus, sigmas, COUNTS, SIZES):
            assert mu.shape == s.shape == (1, c, sz, sz)

    def test_high_band_reaches_low_params(self):
        m = _model()
        y, psi = _inputs()
        base = m(y, psi)[0][2]
        y2 = (y[0] + 1.0, y[1], y[2])
        assert (m(y2, psi)[0][2] - base).abs().max() > 1e-6

    @pytest.mark.parametrize("case", sorted(CONTEXT_CASES))
    def test_case_wiring(self, case):
        m = _model(case)
        y, psi = _inputs()
        base_mid, base_low = (t.clone() for t in m(y, psi)[0][1:])
        bumped_h = (y[0] + 1.0, y[1], y[2])
        bumped_m = (y[0], y[1] + 1.0, y[2])
        mid_h = (m(bumped_h, psi)[0][1] - base_mid).abs().max().item()
        low_h = (m(bumped_h, psi)[0][2] - base_low).abs().max().item()
        low_m = (m(bumped_m, psi)[0][2] - base_low).abs().max().item()
        live = CONTEXT_CASES[case]
        assert (mid_h > 0) == ("h2m" in live)
        assert (low_h > 0) == ("h2l" in live)
        assert (low_m > 0) == ("m2l" in live)

    def test_staged_matches_single_pass(self):
        m = _model()
        y, psi = _inputs(1)
        mus, sigmas = m(y, psi)
        for band in range(3):
            cross = m.cross_features(band, y)
            mask = anchor_mask(*y[band].shape[2:], y[band])
            mu1, s1 = m.band_params(band, psi[band], None, 1, cross)
            mu2, s2 = m.band_params(band, psi[band], y[band] * mask, 2, cross)
            torch.testing.assert_close(mu1 * mask, mus[band] * mask, atol=1e-12, rtol=0)
            torch.testing.assert_close(s2 * (1 - mask), sigmas[band] * (1 - mask), atol=1e-12, rtol=0)

    def test_causality_fuzz(self):
        m = _model(seed=3)
        rng = np.random.default_rng(0)
        for trial in range(50):
            y, psi = _inputs(100 + trial)
            mus, sigmas = m(y, psi)
            band, stage = int(rng.integers(3)), int(rng.integers(1, 3))
            masks = [anchor_mask(*t.shape[2:], t) for t in y]
            # zero out everything not yet decoded when (band, stage) is coded
            pruned = []
            for b, t in enumerate(y):
                if b < band:
                    pruned.append(t)
                elif b == band and stage == 2:
                    pruned.append(t * masks[b])
                else:
                    pruned.append(torch.zeros_like(t))
            pm, ps = m(tuple(pruned), psi)
            own = masks[band] if stage == 1 else 1 - masks[band]
            for a, b in ((mus[band], pm[band]), (sigmas[band], ps[band])):
                assert (a * own - b * own).abs().max().item() == 0, (trial, band, stage)
            for b in range(band):
                assert torch.equal(mus[b], pm[b]) and torch.equal(sigmas[b], ps[b])

    def test_gradients(self):
        torch.manual_seed(4)
        m = ContextModel((2, 2, 2), 2, 2, case=3).double()
        y = tuple(torch.randn(1, 2, s, s, dtype=torch.float64) for s in (8, 4, 2))
        psi = tuple(torch.randn(1, 2, s, s, dtype=torch.float64) for s in (8, 4, 2))
        w = [torch.randn(1, 2, s, s, dtype=torch.float64) for s in (8, 4, 2)]

        def loss():
            mus, sigmas = m(y, psi)
            return sum((mu * wi).sum() + (s * wi).sum() for mu, s, wi in zip(mus, sigmas, w))

        loss().backward()
        checks = [m.intra[0].conv.weight, m.cross["h2l"].blocks[1].conv1.weight, m.params[2].conv1.weight]
        for t in checks:
            num = O.central_difference(lambda: loss().detach(), t.data)
            assert O.rel_err(t.grad, num) < 1e-4
