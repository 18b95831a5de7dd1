"""Masking-rate sampling, discretization, cosine schedule, sinusoids."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize, stats

from mimgen import schedule as sched


class TestSampleMaskRate:
    def test_boundaries(self):
        assert sched.sample_mask_rate(0.0).r == 0.0
        assert sched.sample_mask_rate(1.0).r == 1.0

    def test_median_matches_numeric_inversion(self):
        # Invert the CDF built by quadrature over the density and compare
        # with the closed form at u = 0.5.
        def cdf(r):
            val, _ = integrate.quad(lambda t: (2 / math.pi) / math.sqrt(1 - t * t), 0, r)
            return val

        numeric = optimize.brentq(lambda r: cdf(r) - 0.5, 0.0, 0.999999)
        closed = sched.sample_mask_rate(0.5).r
        assert closed == pytest.approx(math.sin(math.pi / 4), abs=1e-9)
        assert closed == pytest.approx(0.70711, abs=1e-5)
        assert numeric == pytest.approx(closed, abs=1e-9)

    def test_density_at_zero(self):
        assert sched.mask_rate_density(0.0) == pytest.approx(2 / math.pi)
        assert sched.mask_rate_density(0.0) == pytest.approx(0.63662, abs=1e-5)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            sched.sample_mask_rate(-0.1)
        with pytest.raises(ValueError):
            sched.sample_mask_rate(1.1)

    def test_ks_distance_against_cdf(self):
        rng = np.random.Generator(np.random.PCG64(0))
        draws = sched.sample_mask_rates(rng, 100_000)
        ks = stats.kstest(draws, sched.mask_rate_cdf).statistic
        assert ks < 0.01

    def test_mean_matches_numeric_integration(self):
        analytic, _ = integrate.quad(
            lambda r: r * (2 / math.pi) / math.sqrt(1 - r * r), 0, 1
        )
        assert analytic == pytest.approx(2 / math.pi, abs=1e-9)
        rng = np.random.Generator(np.random.PCG64(1))
        draws = sched.sample_mask_rates(rng, 100_000)
        assert abs(draws.mean() - 2 / math.pi) < 0.005


class TestDiscretize:
    def test_examples(self):
        assert sched.discretize(0.0) == 0
        assert sched.discretize(1.0) == 999
        assert sched.discretize(0.5) == 500

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            sched.discretize(1.0001)
        with pytest.raises(ValueError):
            sched.discretize(-0.0001)

    @given(st.integers(min_value=0, max_value=999))
    def test_midpoint_identity(self, level):
        assert sched.discretize((level + 0.5) / 1000) == level


class TestCosineSchedule:
    def test_single_step_unmasks_everything(self):
        plan = sched.cosine_schedule(1, 64)
        assert list(plan.unmask) == [64]
        assert list(plan.masked) == [64, 0]

    def test_masked_count_at_midpoint_matches_brute_force(self):
        plan = sched.cosine_schedule(8, 64)
        # Brute-force table of floor(cos(pi*t/16) * 64).
        expected = [math.floor(math.cos(math.pi * t / 16) * 64) for t in range(9)]
        assert expected[4] == 45
        assert plan.masked[4] == 45
        np.testing.assert_array_equal(plan.masked, expected)

    def test_steps_exceeding_tokens_rejected(self):
        with pytest.raises(ValueError, match="exceed"):
            sched.cosine_schedule(65, 64)
        with pytest.raises(ValueError):
            sched.cosine_schedule(0, 64)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 128), st.integers(1, 512))
    def test_counts_partition_tokens(self, steps, tokens):
        if steps > tokens:
            with pytest.raises(ValueError):
                sched.cosine_schedule(steps, tokens)
            return
        plan = sched.cosine_schedule(steps, tokens)
        assert plan.unmask.sum() == tokens
        assert plan.unmask.min() >= 1
        assert plan.masked[0] == tokens
        assert plan.masked[-1] == 0
        assert np.all(np.diff(plan.masked) < 0)

    def test_table_dump(self):
        lines = sched.cosine_schedule(2, 4).table().splitlines()
        assert lines[0] == "0\t4"
        assert lines[-1] == "2\t0"


class TestSinusoidalEmbed:
    def test_zero_value(self):
        emb = sched.sinusoidal_embed(0.0, 12)
        np.testing.assert_array_equal(emb[0::2], np.zeros(6))
        np.testing.assert_array_equal(emb[1::2], np.ones(6))

    def test_lowest_frequency_oracle(self):
        # One radian of phase on the slowest channel at value = period/(2*pi).
        for dim, period in ((8, 10000.0), (32, 512.0)):
            emb = sched.sinusoidal_embed(period / (2 * math.pi), dim, period)
            assert emb[-2] == pytest.approx(math.sin(1.0), abs=1e-12)
            assert emb[-1] == pytest.approx(math.cos(1.0), abs=1e-12)

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            sched.sinusoidal_embed(1.0, 7)

    @given(
        st.floats(min_value=0.0, max_value=1000.0, allow_nan=False),
        st.floats(min_value=0.0, max_value=1000.0, allow_nan=False),
    )
    def test_distinct_values_distinct_embeddings(self, a, b):
        if abs(a - b) < 1e-6:
            return
        ea = sched.sinusoidal_embed(a, 16)
        eb = sched.sinusoidal_embed(b, 16)
        assert np.linalg.norm(ea - eb) > 0

    def test_batch_matches_scalar(self):
        values = [0.0, 1.5, 999.0]
        batch = sched.sinusoidal_embed_many(values, 10)
        for v, row in zip(values, batch):
            np.testing.assert_array_equal(sched.sinusoidal_embed(v, 10), row)
