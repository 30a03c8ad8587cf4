"""Gumbel-softmax sampling, temperature schedule, reparameterization."""

import numpy as np
import pytest

from conftest import finite_difference_check, rand_tensor
from segnas.sampling import GumbelSampler, TemperatureSchedule, expected_mask, gumbel_softmax
from segnas.tensor import Tensor, TensorError, dot_const


class TestGumbelSoftmax:
    def test_forced_zero_noise_symmetry(self):
        sampler = GumbelSampler(0, temperature=1.0)
        y = gumbel_softmax(Tensor(np.zeros(2)), sampler, noise=np.zeros(2))
        np.testing.assert_allclose(y.data, [0.5, 0.5], atol=1e-15)

    def test_low_temperature_sharpens(self):
        # Monte-Carlo: at the floor temperature almost every draw is ~one-hot
        sampler = GumbelSampler(42, temperature=0.03)
        logits = Tensor(np.array([5.0, 0.0, 0.0]))
        sharp = 0
        for _ in range(1000):
            y = gumbel_softmax(logits, sampler)
            if y.data.max() > 0.999:
                sharp += 1
        assert sharp >= 990

    def test_mask_sums_to_one(self):
        sampler = GumbelSampler(7, temperature=0.7)
        rng = np.random.default_rng(0)
        for n in (2, 3, 10, 64):
            y = gumbel_softmax(Tensor(rng.standard_normal(n) * 5), sampler)
            assert abs(y.data.sum() - 1.0) <= 1e-12
            assert np.all(y.data > 0)

    def test_gradient_matches_finite_differences(self, rng):
        sampler = GumbelSampler(3, temperature=0.9)
        noise = sampler.gumbel(5)
        logits = rand_tensor(rng, (5,))
        weights = rng.standard_normal(5)
        finite_difference_check(
            lambda: dot_const(gumbel_softmax(logits, sampler, noise=noise), weights), [logits])

    def test_rejects_short_and_non_finite(self):
        sampler = GumbelSampler(0)
        with pytest.raises(TensorError, match=">= 2"):
            gumbel_softmax(Tensor(np.zeros(1)), sampler)
        with pytest.raises(TensorError, match="non-finite"):
            gumbel_softmax(Tensor(np.array([np.inf, 0.0])), sampler)

    def test_same_seed_same_stream(self):
        a = GumbelSampler(11, temperature=0.5)
        b = GumbelSampler(11, temperature=0.5)
        logits = Tensor(np.array([0.3, -0.2, 1.0]))
        for _ in range(5):
            np.testing.assert_array_equal(gumbel_softmax(logits, a).data, gumbel_softmax(logits, b).data)

    def test_state_roundtrip(self):
        a = GumbelSampler(5, temperature=0.4)
        a.gumbel(7)
        state = a.state()
        x = a.gumbel(3)
        a.load_state(state)
        np.testing.assert_array_equal(a.gumbel(3), x)

    def test_sharpening_is_monotone_in_temperature(self):
        # the expected max-entry of the mask does not decrease as the
        # temperature anneals down through the schedule's range
        logits = Tensor(np.array([1.0, 0.3, -0.5, 0.0]))
        means = []
        for lam in (3.0, 1.0, 0.1, 0.03):
            sampler = GumbelSampler(99, temperature=lam)
            means.append(np.mean([gumbel_softmax(logits, sampler).data.max() for _ in range(1000)]))
        assert all(b >= a - 1e-9 for a, b in zip(means, means[1:]))


class TestExpectedMask:
    def test_matches_softmax(self):
        np.testing.assert_allclose(expected_mask(np.zeros(2)), [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(expected_mask(np.array([1000.0, 1000.0])), [0.5, 0.5], atol=1e-15)
        e = np.exp(2.0) / (np.exp(2.0) + 1.0)
        np.testing.assert_allclose(expected_mask(np.array([2.0, 0.0])), [e, 1 - e], atol=1e-6)

    def test_accepts_tensor(self):
        y = expected_mask(Tensor(np.array([0.0, 0.0, 0.0])))
        np.testing.assert_allclose(y, np.full(3, 1 / 3), atol=1e-15)

    def test_rejects_non_finite(self):
        with pytest.raises(TensorError):
            expected_mask(np.array([np.nan, 1.0]))


class TestTemperatureSchedule:
    def test_endpoints(self):
        sched = TemperatureSchedule(3.0, 0.03, total_epochs=150)
        assert sched.at(0) == pytest.approx(3.0)
        assert sched.at(150) == pytest.approx(0.03)

    def test_midpoint_closed_form(self):
        sched = TemperatureSchedule(3.0, 0.03, total_epochs=100)
        assert sched.at(50) == pytest.approx(3.0 * 0.01**0.5, abs=1e-9)  # = 0.3

    def test_monotone_and_clamped(self):
        sched = TemperatureSchedule(3.0, 0.03, total_epochs=20)
        vals = [sched.at(e) for e in range(30)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
        assert min(vals) >= 0.03

    def test_rejects_bad_params(self):
        with pytest.raises(TensorError):
            TemperatureSchedule(0.01, 0.03, 10)
        sched = TemperatureSchedule(3.0, 0.03, 10)
        with pytest.raises(TensorError):
            sched.at(-1)
