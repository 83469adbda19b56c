import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffsep import autodiff as ad
from diffsep.synth import (harmonic_synth, noise_synth, nyquist_mask, oscillator_bank, soft_mask_separate,
                           soft_masks)


def test_single_harmonic_matches_a_sine():
    sr, hop, n = 16000, 256, 4096
    frames = n // hop + 1
    f0 = np.full(frames, 250.0)
    amps = np.zeros((frames, 4))
    amps[:, 0] = 1.0
    y = harmonic_synth(f0, ad.Value(amps), ad.Value(np.full(frames, 0.5)), sr, hop, n).data
    t = np.arange(n) / sr
    np.testing.assert_allclose(y, 0.5 * np.sin(2 * np.pi * 250 * t), atol=1e-6)


def test_harmonics_above_nyquist_are_silent():
    mask = nyquist_mask(np.array([3000.0, 0.0]), 4, 16000)
    np.testing.assert_array_equal(mask, [[1, 1, 0, 0], [0, 0, 0, 0]])


def test_unvoiced_frames_give_silence():
    frames = 17
    y = harmonic_synth(np.zeros(frames), ad.Value(np.ones((frames, 3))), ad.Value(np.ones(frames)),
                       n_samples=4096).data
    assert np.all(y == 0)


def test_oscillator_bank_matches_direct_sum():
    sr = 16000
    f0 = np.full(800, 200.0)
    amps = np.array([[1.0] * 800, [0.5] * 800])
    t = np.arange(800) / sr
    ref = np.sin(2 * np.pi * 200 * t) + 0.5 * np.sin(4 * np.pi * 200 * t)
    np.testing.assert_allclose(oscillator_bank(f0, amps, sr), ref, atol=1e-9)


def test_flat_noise_filter_keeps_energy_band_limited():
    frames, bands = 33, 65
    noise = np.random.default_rng(0).uniform(-1, 1, 8192)
    y = noise_synth(ad.Value(np.ones((frames, bands))), noise=noise, n_samples=8192).data
    # unit magnitude FIR passes white noise roughly unchanged in power
    assert 0.5 < np.var(y[512:-512]) / np.var(noise) < 1.5


def test_noise_is_zero_for_zero_magnitudes():
    y = noise_synth(ad.Value(np.zeros((9, 65))), seed=3).data
    assert np.all(y == 0)


@given(st.integers(2, 4), st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_masks_sum_to_one(j, seed):
    src = np.random.default_rng(seed).standard_normal((j, 2048))
    src[0] = 0.0
    m = soft_masks(src)
    np.testing.assert_allclose(m.sum(axis=0), 1.0, atol=1e-6)
    assert m.min() >= 0 and m.max() <= 1


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_separated_stems_sum_to_the_mixture(seed):
    r = np.random.default_rng(seed)
    mix = r.standard_normal(3000)
    est = soft_mask_separate(mix, r.standard_normal((4, 3000)))
    assert np.max(np.abs(est.sum(axis=0) - mix)) < 1e-5


def test_soft_mask_separate_checks_lengths():
    with pytest.raises(ValueError):
        soft_mask_separate(np.zeros(1000), np.zeros((2, 999)))


def test_partial_tail_block_gradient():
    from diffsep.gradcheck import check
    r = np.random.default_rng(2)
    frames, n = 5, 4 * 16 + 9
    f0 = r.uniform(200, 900, frames)

    def fn(amps, gain):
        return ad.sum(harmonic_synth(f0, amps, gain, 16000, 16, n) ** 2)

    assert check(fn, [r.uniform(0.1, 1, (frames, 6)), r.uniform(0.1, 1, frames)]) < 1e-6
