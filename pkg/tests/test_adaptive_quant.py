import math

import numpy as np
import torch

from freqcodec.adaptive_quant import DELTA_MAX, DELTA_MIN, DeltaHead, quantize_test, quantize_train, round_half_away
from freqcodec.entropy_models import gaussian_uniform_mass

import oracles as O


class TestDeltaHead:
    def test_unit_delta_at_init(self):
        head = DeltaHead(16, 4)
        d = head(torch.zeros(1, 16, 5, 5))
        assert d.shape == (1, 4, 5, 5)
        torch.testing.assert_close(d, torch.ones_like(d), atol=0, rtol=0)

    def test_bounds(self):
        torch.manual_seed(0)
        head = DeltaHead(8, 8)
        with torch.no_grad():
            head.conv2.weight.mul_(1000)
        d = head(torch.randn(2, 8, 6, 6) * 100)
        assert d.min() >= DELTA_MIN * (1 - 1e-6) and d.max() <= DELTA_MAX * (1 + 1e-6)
        assert d.min() < 0.06 and d.max() > 3.9

    def test_gradients(self):
        torch.manual_seed(1)
        head = DeltaHead(4, 3).double()
        psi = torch.randn(1, 4, 3, 3, dtype=torch.float64)
        w = torch.randn(1, 3, 3, 3, dtype=torch.float64)
        loss = lambda: (head(psi) * w).sum()
        loss().backward()
        for p in head.parameters():
            num = O.central_difference(lambda: loss().detach(), p.data)
            assert O.rel_err(p.grad, num) < 1e-4


class TestQuantizeTrain:
    def test_interval_bound(self):
        g = torch.Generator().manual_seed(0)
        y = torch.randn(1000)
        d = torch.rand(1000) * 3 + 0.05
        yt = quantize_train(y, d, g)
        assert torch.all((yt - y).abs() <= d / 2 + 1e-6)

    def test_zero_step_limit(self):
        y = torch.randn(100)
        torch.testing.assert_close(quantize_train(y, torch.zeros(100)), y, atol=0, rtol=0)

    def test_moments(self):
        g = torch.Generator().manual_seed(3)
        n = 100_000
        delta = 0.7
        u = (quantize_train(torch.zeros(n, dtype=torch.float64), torch.full((n,), delta, dtype=torch.float64), g)).numpy()
        var = delta**2 / 12
        assert abs(u.mean()) < 3 * math.sqrt(var / n)
        assert abs(u.var() / var - 1) < 0.05

    def test_fresh_noise_each_call(self):
        g = torch.Generator().manual_seed(0)
        y, d = torch.zeros(10), torch.ones(10)
        assert not torch.equal(quantize_train(y, d, g), quantize_train(y, d, g))

    def test_gradients(self):
        y = torch.randn(50, requires_grad=True)
        d = (torch.rand(50) + 0.5).requires_grad_()
        g = torch.Generator().manual_seed(5)
        yt = quantize_train(y, d, g)
        yt.sum().backward()
        torch.testing.assert_close(y.grad, torch.ones(50))
        # d(yt)/d(delta) = v - 1/2 = (yt - y) / delta
        torch.testing.assert_close(d.grad, ((yt - y) / d).detach())


class TestQuantizeTest:
    def test_example(self):
        k, yh = quantize_test(torch.tensor([1.3]), torch.tensor([0.5]))
        assert k.item() == 3 and yh.item() == 1.5

    def test_unit_step_is_rounding(self):
        y = torch.tensor([-2.5, -1.5, -0.5, 0.49, 0.5, 1.5, 2.4])
        k, yh = quantize_test(y, torch.ones_like(y))
        assert k.tolist() == [-3, -2, -1, 0, 1, 2, 2]
        assert k.dtype == torch.int64

    def test_zero(self):
        for d in [0.05, 0.3, 1.0, 4.0]:
            k, yh = quantize_test(torch.zeros(3), torch.full((3,), d))
            assert k.tolist() == [0, 0, 0] and yh.abs().sum() == 0

    def test_error_bound_and_idempotence(self):
        g = torch.Generator().manual_seed(0)
        y = torch.randn(10000, generator=g) * 5
        d = torch.rand(10000, generator=g) * 3.95 + 0.05
        k, yh = quantize_test(y, d)
        assert torch.all((yh - y).abs() <= d / 2 * (1 + 1e-6))
        k2, yh2 = quantize_test(yh, d)
        assert torch.equal(k, k2) and torch.equal(yh, yh2)

    def test_ties_away_from_zero(self):
        assert round_half_away(torch.tensor([0.5, -0.5, 2.5, -2.5])).tolist() == [1, -1, 3, -3]


class TestRateMonotonicity:
    def test_expected_code_length_decreases_with_step(self):
        # expected -log2 P(k) for y ~ N(mu, sigma), k = round(y / delta)
        mu, sigma = torch.tensor(0.3, dtype=torch.float64), torch.tensor(1.7, dtype=torch.float64)
        lengths = []
        for delta in [0.25, 0.5, 1.0, 2.0]:
            k = torch.arange(-200, 201, dtype=torch.float64)
            p = gaussian_uniform_mass(k * delta, mu, sigma, delta)
            p = p[p > 0]
            lengths.append(float(-(p * torch.log2(p)).sum()))
        assert np.all(np.diff(lengths) < 0)
