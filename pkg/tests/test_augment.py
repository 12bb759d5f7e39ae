import numpy as np
import pytest
from scipy.signal import freqz

from helpers import peak_hz, rms, sine
from tagformer import augment as A
from tagformer.dsp import Waveform
from tagformer.errors import ParameterError

SR = 22050


def wave(x):
    return Waveform(np.asarray(x, dtype=np.float64), SR)


def noise(n=SR, seed=0, scale=0.2):
    return wave(np.random.default_rng(seed).standard_normal(n) * scale)


def steady_gain_db(out, inp):
    # skip the filter transient
    return 20 * np.log10(rms(out[2000:]) / rms(inp[2000:]))


def butterworth_db(f, fc, kind):
    # 2nd-order Butterworth magnitude on the bilinear-warped frequency axis
    r = (np.tan(np.pi * f / SR) / np.tan(np.pi * fc / SR)) ** 4
    mag2 = 1 / (1 + r) if kind == "low" else r / (1 + r)
    return 10 * np.log10(mag2)


class TestChain:
    def test_all_zero_probabilities_is_identity(self):
        w = noise()
        chain = A.AugmentChain.build(A.AugmentSpec.with_probabilities({}), seed=1)
        out = A.apply_chain(w, chain, np.random.default_rng(0))
        np.testing.assert_array_equal(out.samples, w.samples)

    def test_polarity_only(self):
        w = noise()
        chain = A.AugmentChain.build(A.AugmentSpec.with_probabilities({"polarity": 1.0}), seed=1)
        np.testing.assert_array_equal(A.apply_chain(w, chain, np.random.default_rng(0)).samples, -w.samples)

    def test_deterministic_given_seed(self):
        w = noise(seed=3)
        chain = A.AugmentChain.build(A.AugmentSpec.with_probabilities({}, default=0.8), seed=5)
        a = A.apply_chain(w, chain, np.random.default_rng(42)).samples
        b = A.apply_chain(w, chain, np.random.default_rng(42)).samples
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("seed", range(5))
    def test_length_and_range_preserved(self, seed):
        w = wave(np.clip(np.random.default_rng(seed).standard_normal(20000), -1, 1))
        chain = A.AugmentChain.build(A.AugmentSpec.with_probabilities({}, default=1.0), seed=seed)
        out = A.apply_chain(w, chain, np.random.default_rng(seed)).samples
        assert len(out) == len(w)
        assert np.abs(out).max() <= 1.0

    def test_probabilities_drawn_from_range(self):
        chain = A.AugmentChain.build(A.AugmentSpec(), seed=7)
        assert all(0.3 <= p <= 0.7 for p in chain.probabilities.values())
        assert A.AugmentChain.build(A.AugmentSpec(), seed=7).probabilities == chain.probabilities

    def test_disabled_never_fires(self):
        chain = A.AugmentChain.build(A.AugmentSpec.disabled(), seed=0)
        rng = np.random.default_rng(0)
        assert all(chain.sample(rng) == [] for _ in range(100))

    def test_activation_rates(self):
        probs = dict(zip(A.ORDER, [0.3, 0.7, 0.5, 0.45, 0.35, 0.6, 0.55, 0.65]))
        chain = A.AugmentChain.build(A.AugmentSpec.with_probabilities(probs), seed=0)
        rng = np.random.default_rng(123)
        counts = dict.fromkeys(A.ORDER, 0)
        for _ in range(10_000):
            for name, _value in chain.sample(rng):
                counts[name] += 1
        for name in A.ORDER:
            assert abs(counts[name] / 10_000 - probs[name]) < 0.02

    def test_parameters_within_ranges(self):
        chain = A.AugmentChain.build(A.AugmentSpec.with_probabilities({}, default=1.0), seed=0)
        rng = np.random.default_rng(0)
        for _ in range(500):
            for name, value in chain.sample(rng):
                lo, hi = A.DEFAULT_RANGES[name]
                assert lo <= value <= hi
                if name == "pitch_shift":
                    assert isinstance(value, int)

    def test_spec_validation(self):
        with pytest.raises(ParameterError):
            A.AugmentSpec(p_range=(0.8, 0.2))
        with pytest.raises(ParameterError):
            A.spec_with(A.AugmentSpec(), gain={"low": 0.0, "high": -5.0})
        with pytest.raises(ParameterError):
            A.spec_with(A.AugmentSpec(), noise={"p": 1.5})


class TestPolarityAndGain:
    def test_involution(self):
        w = noise()
        assert np.array_equal(A.polarity_inversion(A.polarity_inversion(w)).samples, w.samples)

    def test_zero_and_rms(self):
        assert np.all(A.polarity_inversion(wave(np.zeros(10))).samples == 0)
        w = noise()
        assert rms(A.polarity_inversion(w).samples) == rms(w.samples)

    def test_gain_exact(self):
        w = noise()
        np.testing.assert_allclose(A.random_gain(w, -20).samples, w.samples * 0.1, atol=1e-6)
        np.testing.assert_allclose(A.random_gain(w, -6.0206).samples, w.samples * 0.5, atol=1e-6)
        np.testing.assert_array_equal(A.random_gain(w, 0).samples, w.samples)

    def test_gain_composes(self):
        w = noise()
        np.testing.assert_allclose(A.random_gain(A.random_gain(w, -3), -5).samples, A.random_gain(w, -8).samples, rtol=1e-12)


class TestNoise:
    def test_power_additivity(self):
        x = sine(440, 2.0, amp=np.sqrt(2))  # unit RMS
        levels = [rms(A.additive_noise(wave(x), 0.3, np.random.default_rng(s)).samples) for s in range(20)]
        assert np.mean(levels) == pytest.approx(np.sqrt(1.09), rel=0.02)

    def test_silent_passthrough(self):
        assert np.all(A.additive_noise(wave(np.zeros(100)), 0.4, np.random.default_rng(0)).samples == 0)

    def test_small_k_approaches_identity(self):
        w = noise()
        err = rms(A.additive_noise(w, 1e-6, np.random.default_rng(0)).samples - w.samples)
        assert err < 1e-6 * rms(w.samples) * 1.01


class TestFilters:
    def test_high_pass_attenuates_low_tone(self):
        x = sine(100, 1.0)
        assert steady_gain_db(A.high_pass(wave(x), 2200).samples, x) <= -20

    def test_high_pass_tone_at_quarter_cutoff(self):
        for fc in (2200, 3000, 4000):
            x = sine(fc / 4, 1.0)
            assert steady_gain_db(A.high_pass(wave(x), fc).samples, x) <= -20

    def test_high_pass_keeps_high_tone(self):
        x = sine(10000, 1.0)
        assert steady_gain_db(A.high_pass(wave(x), 2200).samples, x) >= -1

    def test_high_pass_blocks_dc(self):
        out = A.high_pass(wave(np.ones(SR)), 2200).samples
        assert abs(out[-100:]).max() < 1e-6

    def test_low_pass_mirror(self):
        x = sine(5000, 1.0)
        assert steady_gain_db(A.low_pass(wave(x), 1200).samples, x) <= -20
        x = sine(50, 1.0)
        assert steady_gain_db(A.low_pass(wave(x), 1200).samples, x) >= -1
        out = A.low_pass(wave(np.ones(SR)), 500).samples
        assert out[-1] == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("kind,fc", [("high", 2200), ("high", 4000), ("low", 200), ("low", 1200)])
    def test_response_matches_butterworth(self, kind, fc):
        b, a = A.biquad_coefficients(kind, fc, SR)
        freqs = np.array([fc / 4, fc / 2, fc, 2 * fc])
        _, h = freqz(b, a, worN=freqs, fs=SR)
        np.testing.assert_allclose(20 * np.log10(np.abs(h)), butterworth_db(freqs, fc, kind), atol=1e-6)


class TestDelay:
    def test_impulse_echo(self):
        x = np.zeros(SR)
        x[0] = 1.0
        y = A.delay(wave(x), 200).samples
        nz = np.flatnonzero(y)
        assert list(nz) == [0, 4410]
        assert y[4410] / y[0] == pytest.approx(0.5)

    def test_silence_and_length(self):
        y = A.delay(wave(np.zeros(1000)), 300).samples
        assert len(y) == 1000 and np.all(y == 0)

    def test_leading_region_scaled(self):
        w = noise()
        y = A.delay(w, 250).samples
        d = int(round(250 * SR / 1000))
        np.testing.assert_allclose(y[:d], w.samples[:d] / 1.5)


class TestPitchShift:
    @pytest.mark.parametrize("n,expected", [(12, 880), (-12, 220), (7, 440 * 2 ** (7 / 12))])
    def test_peak_moves(self, n, expected):
        x = sine(440, 2.0)
        y = A.pitch_shift(wave(x), n).samples
        assert len(y) == len(x)
        nonzero = y[: int(len(y) * min(1, 2 ** (-n / 12)))]
        assert peak_hz(nonzero, SR) == pytest.approx(expected, rel=0.03)

    def test_zero_is_identity(self):
        w = noise()
        np.testing.assert_array_equal(A.pitch_shift(w, 0).samples, w.samples)


def decay_time(h, sr, floor_db=-60.0):
    """Time until the backward-integrated energy falls below ``floor_db``."""
    edc = np.cumsum((h**2)[::-1])[::-1]
    edc_db = 10 * np.log10(edc / edc[0] + 1e-30)
    below = np.flatnonzero(edc_db < floor_db)
    return below[0] / sr if below.size else len(h) / sr


class TestReverb:
    def test_bigger_room_decays_longer(self):
        x = np.zeros(3 * SR)
        x[0] = 1.0
        small = A.reverb(wave(x), 0).samples
        large = A.reverb(wave(x), 100).samples
        assert decay_time(large, SR) > decay_time(small, SR)

    def test_monotone_in_room_size(self):
        x = np.zeros(3 * SR)
        x[0] = 1.0
        times = [decay_time(A.reverb(wave(x), s).samples, SR) for s in (0, 25, 50, 75, 100)]
        assert all(a < b for a, b in zip(times, times[1:]))

    def test_silence(self):
        assert np.all(A.reverb(wave(np.zeros(5000)), 50).samples == 0)

    @pytest.mark.parametrize("room", [0, 50, 100])
    def test_rms_bounded_on_noise(self, room):
        for seed in range(5):
            w = noise(seed=seed)
            ratio = rms(A.reverb(w, room).samples) / rms(w.samples)
            assert 0.5 <= ratio <= 2.0

    def test_comb_matches_direct_recursion(self):
        x = np.random.default_rng(0).standard_normal(500)
        y = A._feedback_comb(x, 7, 0.8)
        ref = x.copy()
        for n in range(7, 500):
            ref[n] = x[n] + 0.8 * ref[n - 7]
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_allpass_matches_direct_recursion(self):
        x = np.random.default_rng(1).standard_normal(300)
        y = A._allpass(x, 5, 0.7)
        ref = np.zeros(300)
        for n in range(300):
            ref[n] = -0.7 * x[n] + (x[n - 5] + 0.7 * ref[n - 5] if n >= 5 else 0.0)
        np.testing.assert_allclose(y, ref, atol=1e-12)
