import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scfalab import privacy
from scfalab.errors import ConfigError
from scfalab.rng import stream

vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3))


@pytest.mark.parametrize("eps,expected", [(10, 0.48448), (1, 4.8448), (100, 0.048448)])
def test_noise_scale_values(eps, expected):
    assert privacy.noise_scale(privacy.PrivacyBudget(eps, 1e-5)) == pytest.approx(expected, abs=5e-5 * expected)


def test_noise_scale_inverse_in_epsilon():
    a = privacy.noise_scale(privacy.PrivacyBudget(1.0))
    b = privacy.noise_scale(privacy.PrivacyBudget(10.0))
    assert a == pytest.approx(10 * b, rel=1e-14)


def test_budget_validation():
    with pytest.raises(ConfigError):
        privacy.PrivacyBudget(0.0)
    with pytest.raises(ConfigError):
        privacy.PrivacyBudget(1.0, 1.0)
    with pytest.raises(ConfigError):
        privacy.DPConfig(clip=0.0)


def test_clip_examples():
    v = np.array([0.0, 4.0, 0.0])
    out = privacy.clip(v, 1.0)
    assert np.linalg.norm(out) == pytest.approx(1.0) and np.allclose(out / np.linalg.norm(out), v / 4)
    w = np.array([0.3, 0.4])
    assert np.array_equal(privacy.clip(w, 1.0), w)
    with pytest.raises(ConfigError):
        privacy.clip(w, 0.0)


@settings(max_examples=1000)
@given(vectors, st.floats(1e-3, 1e3))
def test_clip_contracts(v, C):
    out = privacy.clip(v, C)
    n = np.linalg.norm(v)
    assert abs(np.linalg.norm(out) - min(n, C)) <= 1e-12 * max(1.0, C)
    assert np.allclose(privacy.clip(out, C), out, rtol=1e-12, atol=1e-12 * C)
    if n > 0:
        assert np.all(out * v >= 0)


@settings(max_examples=300)
@given(vectors, st.floats(1e-2, 10), st.floats(0.01, 1.0))
def test_clip_homogeneous_in_threshold(v, C, lam):
    if np.linalg.norm(v) >= lam * C:
        assert np.linalg.norm(privacy.clip(v, lam * C)) == pytest.approx(lam * C, rel=1e-12)


@settings(max_examples=200)
@given(vectors, st.floats(1e-2, 10))
def test_privatize_without_noise_is_clip(v, C):
    cfg = privacy.DPConfig(clip=C, sigma=0.0)
    assert np.array_equal(privacy.privatize(v, cfg, stream(0)), privacy.clip(v, C))


def test_empirical_noise_std():
    cfg = privacy.DPConfig(clip=1.0, sigma=0.5)
    r = stream(3, "dp-test")
    draws = np.array([privacy.privatize(np.zeros(4), cfg, r) for _ in range(100_000)])
    std = draws.std(axis=0)
    assert np.all((std >= 0.49) & (std <= 0.51))


def test_privatize_replay():
    cfg = privacy.DPConfig.from_budget(privacy.PrivacyBudget(10.0))
    v = np.ones(5)
    assert np.array_equal(privacy.privatize(v, cfg, stream(1, "x")), privacy.privatize(v, cfg, stream(1, "x")))


def test_snr_examples():
    clean = np.array([2.0, 0.0])
    assert privacy.gradient_snr(clean, clean) == math.inf
    assert privacy.gradient_snr(np.zeros(2), np.array([0.0, 1.0])) == 0.0
    assert privacy.gradient_snr(clean, clean + np.array([0.0, 1.0])) == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        privacy.gradient_snr(np.zeros(2), np.zeros(3))


def test_sequential_composition():
    b = privacy.composed_budget(privacy.PrivacyBudget(10.0, 1e-5), 5)
    assert b.epsilon == 50.0 and b.delta == pytest.approx(5e-5)
