#!/usr/bin/env python3
import numpy as np
import pytest
from hypothesis import given, strategies as st

from filters import (AlphaOutOfRange, ExponentialAverage, InvalidNoise, Kalman1D, PassThrough,
                     RollingAverage, UnknownFilter, VectorFilter, WindowSizeError, exp_update,
                     kalman_update, make_filter, rolling_update)


def test_rolling_constant_and_hand_values():
    f = RollingAverage(4)
    assert all(rolling_update(f, 3.5) == 3.5 for _ in range(10))
    f = RollingAverage(2)
    assert [rolling_update(f, x) for x in (1, 3)] == [1, 2]


def test_rolling_matches_brute_force_mean():
    samples = np.random.default_rng(7).normal(100.0, 5.0, 1000)
    f = RollingAverage(3)
    for i, x in enumerate(samples):
        expected = samples[max(0, i - 2):i + 1].mean()
        assert rolling_update(f, x) == pytest.approx(expected, rel=1e-12)


def test_exponential_hand_recursion():
    f = ExponentialAverage(0.5)
    assert [exp_update(f, x) for x in (0, 10, 10)] == [0, 5, 7.5]


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_exponential_limits(samples):
    one = ExponentialAverage(1.0)
    assert [exp_update(one, x) for x in samples] == samples
    zero = ExponentialAverage(0.0)
    assert [exp_update(zero, x) for x in samples] == [samples[0]] * len(samples)


def test_kalman_converges_with_zero_process_noise():
    z, x0 = 10.0, 0.0
    f = Kalman1D(q=0.0, r=1.0, x0=x0, initial_variance=1e7)
    errors = []
    last_p = f.p
    for _ in range(200):
        kalman_update(f, z)
        assert 0.0 <= f.gain <= 1.0
        assert f.p < last_p
        last_p = f.p
        errors.append(abs(f.x - z))
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 1e-6 * abs(z - x0)


def test_kalman_huge_measurement_noise_barely_moves():
    f = Kalman1D(q=0.0, r=1e12, x0=0.0, initial_variance=1.0)
    kalman_update(f, 1.0)
    assert abs(f.x - 0.0) < 1e-6 * 1.0


def test_kalman_matches_reference_recursion():
    f = Kalman1D(q=0.01, r=1.0, x0=0.0)
    x, p = 0.0, 1.0
    for _ in range(50):
        p = p + 0.01
        k = p / (p + 1.0)
        x = x + k * (1.0 - x)
        p = (1.0 - k) * p
        assert kalman_update(f, 1.0) == pytest.approx(x, abs=1e-12)


def test_kalman_seeds_on_first_measurement():
    f = Kalman1D(q=0.1, r=2.0)
    assert kalman_update(f, 42.0) == 42.0


def test_invalid_parameters():
    with pytest.raises(WindowSizeError):
        RollingAverage(0)
    with pytest.raises(AlphaOutOfRange):
        ExponentialAverage(1.5)
    with pytest.raises(InvalidNoise):
        Kalman1D(q=0.0, r=0.0)
    with pytest.raises(InvalidNoise):
        Kalman1D(q=-1.0, r=1.0)


def test_make_filter():
    assert isinstance(make_filter(None), PassThrough)
    assert isinstance(make_filter({"type": "rolling", "window": 3}), RollingAverage)
    vector = make_filter({"type": "exponential", "alpha": 0.5}, vector=True)
    assert isinstance(vector, VectorFilter)
    assert vector.update((0.0, 2.0, 4.0)) == (0.0, 2.0, 4.0)
    assert vector.update((2.0, 2.0, 0.0)) == (1.0, 2.0, 2.0)
    with pytest.raises(UnknownFilter):
        make_filter({"type": "median"})
