import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from helpers import peak_hz, sine
from tagformer import dsp
from tagformer.dsp import Waveform
from tagformer.errors import EmptyInputError, FormatError, ParameterError, TooShortError

SR = dsp.SAMPLE_RATE


class TestLoadAudio:
    def test_stereo_cancellation(self, tmp_path):
        x = (sine(440, 0.5) * 32767).astype(np.int16)
        wavfile.write(tmp_path / "s.wav", SR, np.stack([x, -x], axis=1))
        w = dsp.load_audio(tmp_path / "s.wav")
        assert np.all(w.samples == 0)

    def test_44k_resampled_to_22k(self, tmp_path):
        wavfile.write(tmp_path / "a.wav", 44100, sine(440, 1.0, sr=44100).astype(np.float32))
        w = dsp.load_audio(tmp_path / "a.wav")
        assert w.sample_rate == SR
        assert abs(len(w) - 22050) <= 1

    def test_native_rate_bypasses_resampler(self, tmp_path):
        x = np.random.default_rng(0).integers(-32768, 32767, 1000).astype(np.int16)
        wavfile.write(tmp_path / "n.wav", SR, x)
        w = dsp.load_audio(tmp_path / "n.wav")
        np.testing.assert_array_equal(w.samples, x / 32768.0)

    @pytest.mark.parametrize("dtype,scale", [(np.int32, 2**31), (np.float32, 1.0)])
    def test_other_encodings(self, tmp_path, dtype, scale):
        x = (sine(300, 0.1) * (scale * 0.9 if dtype != np.float32 else 1)).astype(dtype)
        wavfile.write(tmp_path / "e.wav", SR, x)
        w = dsp.load_audio(tmp_path / "e.wav")
        assert np.abs(w.samples).max() <= 1.0
        np.testing.assert_allclose(w.samples, sine(300, 0.1) * (0.9 if dtype != np.float32 else 1), atol=1e-6)

    def test_errors(self, tmp_path):
        with pytest.raises(OSError):
            dsp.load_audio(tmp_path / "missing.wav")
        (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
        with pytest.raises(FormatError):
            dsp.load_audio(tmp_path / "junk.wav")
        wavfile.write(tmp_path / "empty.wav", SR, np.zeros(0, dtype=np.int16))
        with pytest.raises(EmptyInputError):
            dsp.load_audio(tmp_path / "empty.wav")


class TestResample:
    def test_same_rate_identity(self):
        x = np.random.default_rng(0).standard_normal(500)
        np.testing.assert_array_equal(dsp.resample(Waveform(x, SR), SR).samples, x)

    def test_sine_peak_preserved(self):
        y = dsp.resample(Waveform(sine(440, 1.0, sr=44100), 44100), SR)
        assert abs(peak_hz(y.samples, SR) - 440) <= SR / len(y)

    def test_dc_preserved(self):
        y = dsp.resample(Waveform(np.full(44100, 0.25), 44100), SR).samples
        interior = y[2000:-2000]
        np.testing.assert_allclose(interior, 0.25, rtol=1e-3)

    @pytest.mark.parametrize("n", [1000, 1001, 44100, 12345])
    def test_length_formula(self, n):
        y = dsp.resample(Waveform(np.zeros(n), 44100), SR)
        assert len(y) == round(n * SR / 44100)

    def test_round_trip_keeps_band_limited_peak(self):
        x = sine(3000, 1.0)
        up = dsp.resample(Waveform(x, SR), 44100)
        back = dsp.resample(up, SR)
        assert abs(peak_hz(back.samples, SR) - 3000) <= SR / len(back.samples)

    def test_bad_rate(self):
        with pytest.raises(ParameterError):
            dsp.resample(Waveform(np.zeros(10), SR), 0)


class TestStft:
    def test_silence(self):
        assert np.all(dsp.stft_magnitude(Waveform(np.zeros(4096), SR)) == 0)

    def test_chunk_frame_count(self):
        mag = dsp.stft_magnitude(Waveform(np.zeros(81364), SR))
        assert mag.shape == (513, 157)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1024, 30000))
    def test_frame_count_formula(self, n):
        mag = dsp.stft_magnitude(Waveform(np.zeros(n), SR))
        assert mag.shape[1] == (n - 1024) // 512 + 1 == dsp.n_frames(n)

    @pytest.mark.parametrize("k", [5, 40, 200])
    def test_bin_center_sine(self, k):
        mag = dsp.stft_magnitude(Waveform(sine(k * SR / 1024, 0.5), SR))
        assert np.all(mag.argmax(axis=0) == k)

    def test_too_short(self):
        with pytest.raises(TooShortError):
            dsp.stft_magnitude(Waveform(np.zeros(1000), SR))


class TestMelFilterbank:
    def test_default_shape_and_rows(self):
        fb = dsp.mel_filterbank(22050, 1024, 128, 0, 11025)
        assert fb.weights.shape == (128, 513)
        assert np.all(fb.weights >= 0)
        assert np.all(fb.weights.max(axis=1) > 0)
        assert np.all(np.diff(fb.center_hz) > 0)

    def test_single_band_spans_range(self):
        fb = dsp.mel_filterbank(22050, 1024, 1, 100, 5000)
        freqs = np.arange(513) * 22050 / 1024
        nz = freqs[fb.weights[0] > 0]
        assert nz.min() > 100 and nz.max() < 5000
        assert fb.weights[0].argmax() == np.argmin(np.abs(freqs - fb.center_hz[0]))

    def test_htk_scale(self):
        assert dsp.hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))
        np.testing.assert_allclose(dsp.mel_to_hz(dsp.hz_to_mel([0, 440, 8000])), [0, 440, 8000])

    def test_area_normalized(self):
        fb = dsp.mel_filterbank(22050, 8192, 16, 500, 8000)
        df = 22050 / 8192
        areas = fb.weights.sum(axis=1) * df
        np.testing.assert_allclose(areas, 1.0, rtol=0.02)

    @pytest.mark.parametrize("args", [(22050, 1024, 128, 5000, 4000), (22050, 1024, 0, 0, 11025), (22050, 1024, 8, 0, 12000)])
    def test_bad_params(self, args):
        with pytest.raises(ParameterError):
            dsp.mel_filterbank(*args)


class TestLogMel:
    def test_silence_is_floor(self):
        lm = dsp.log_mel(Waveform(np.zeros(5000), SR))
        assert np.all(lm.values == lm.values.flat[0])
        assert lm.values.flat[0] == pytest.approx(20 * np.log10(dsp.LOG_EPS))

    def test_chunk_shape(self):
        lm = dsp.log_mel(Waveform(np.zeros(dsp.chunk_samples(3.69)), SR))
        assert lm.shape == (128, 157)

    def test_half_amplitude_shifts_6db(self):
        x = np.random.default_rng(0).standard_normal(8192) * 0.3
        a = dsp.log_mel(Waveform(x, SR), top_db=None).values
        b = dsp.log_mel(Waveform(0.5 * x, SR), top_db=None).values
        np.testing.assert_allclose(b - a, 20 * np.log10(0.5), atol=1e-9)

    def test_clamped_to_80db_range(self):
        lm = dsp.log_mel(Waveform(sine(1000, 1.0), SR)).values
        assert lm.max() - lm.min() <= 80.0 + 1e-9
        assert np.all(np.isfinite(lm))

    def test_polarity_invariant(self):
        x = np.random.default_rng(1).standard_normal(6000)
        np.testing.assert_array_equal(dsp.log_mel(Waveform(x, SR)).values, dsp.log_mel(Waveform(-x, SR)).values)

    def test_energy_grows_with_rms(self):
        noise = np.random.default_rng(2).standard_normal(20000)
        energies = [dsp.log_mel(Waveform(a * noise, SR), top_db=None).values.mean() for a in (0.01, 0.05, 0.2, 0.8)]
        assert all(x < y for x, y in zip(energies, energies[1:]))


class TestChunking:
    def test_thirty_seconds(self):
        assert len(dsp.chunk_waveform(Waveform(np.zeros(30 * SR), SR))) == 8

    def test_exactly_one(self):
        x = np.random.default_rng(0).standard_normal(dsp.chunk_samples(3.69))
        chunks = dsp.chunk_waveform(Waveform(x, SR))
        assert len(chunks) == 1
        np.testing.assert_array_equal(chunks[0].samples, x)

    def test_half_hop(self):
        w = Waveform(np.zeros(dsp.chunk_samples(7.38)), SR)
        assert len(dsp.chunk_waveform(w, 3.69, 3.69 / 2)) == 3

    def test_too_short(self):
        with pytest.raises(TooShortError):
            dsp.chunk_waveform(Waveform(np.zeros(100), SR))

    def test_chunk_length(self):
        assert dsp.chunk_samples(3.69) == 81364
