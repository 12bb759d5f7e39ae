"""Waveform I/O and log-mel feature extraction.

Defaults: 22,050 Hz mono, 1024-point FFT, hop 512 (50% overlapping Hann
window), 128 HTK-mel bands, dB magnitudes clamped to an 80 dB range.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import EmptyInputError, FormatError, ParameterError, TooShortError

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 512
N_MELS = 128
CHUNK_SECONDS = 3.69
LOG_EPS = 1e-10
TOP_DB = 80.0

KAISER_BETA = 14.77
ZERO_CROSSINGS = 64


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate <= 0:
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ParameterError(f"waveform must be mono (1-d), got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("waveform contains NaN or Inf")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelFilterbank:
    weights: np.ndarray  # [n_mels, n_fft // 2 + 1]
    sr: int
    n_fft: int
    f_min: float
    f_max: float
    center_hz: np.ndarray

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # [n_mels, T], dB
    frame_hop_seconds: float

    @property
    def shape(self):
        return self.values.shape


# -- I/O -----------------------------------------------------------------


def load_audio(path, target_sr: int = SAMPLE_RATE) -> Waveform:
    """Read a PCM or float WAV file as mono float64 in [-1, 1] at ``target_sr``."""
    try:
        sr, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise FormatError(f"{path}: unsupported or malformed WAV ({exc})") from exc
    data = np.asarray(data)
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        # 24-bit files are left-justified into int32 by the reader
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise EmptyInputError(f"{path}: zero-length audio")
    w = Waveform(np.clip(x, -1.0, 1.0), int(sr))
    return resample(w, target_sr)


def save_audio(path, w: Waveform):
    """Write 16-bit PCM."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(path, w.sample_rate, pcm)


# -- resampling ----------------------------------------------------------


@functools.lru_cache(maxsize=64)
def sinc_kernel(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc low-pass for rational rate change ``up/down``.

    Cutoff at the lower of the two Nyquist rates; the kernel spans
    ``ZERO_CROSSINGS`` zero crossings on each side and has unit DC gain
    (polyphase gain ``up`` is applied by the caller).
    """
    rate = max(up, down)
    half = ZERO_CROSSINGS * rate
    n = np.arange(-half, half + 1)
    h = np.sinc(n / rate) * np.kaiser(2 * half + 1, KAISER_BETA)
    h /= h.sum()
    h.setflags(write=False)
    return h


def resample_ratio(x: np.ndarray, ratio: Fraction) -> np.ndarray:
    """Band-limited rate change of ``x`` by ``ratio``; length = round(len * ratio)."""
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(len(x) * up / down))
    if up == down:
        return np.array(x, dtype=np.float64, copy=True)
    y = resample_poly(np.asarray(x, dtype=np.float64), up, down, window=sinc_kernel(up, down))
    if len(y) >= n_out:
        return y[:n_out]
    return np.pad(y, (0, n_out - len(y)))


def resample(w: Waveform, target_sr: int) -> Waveform:
    if target_sr <= 0:
        raise ParameterError(f"target_sr must be positive, got {target_sr}")
    if target_sr == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    y = resample_ratio(w.samples, Fraction(int(target_sr), int(w.sample_rate)))
    return Waveform(y, int(target_sr))


# -- spectral features -----------------------------------------------------


def n_frames(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    return (n_samples - n_fft) // hop + 1


@functools.lru_cache(maxsize=8)
def _hann(n_fft: int) -> np.ndarray:
    # periodic Hann, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)


def stft_magnitude(w: Waveform, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """|STFT| as [n_fft/2 + 1, T] without center padding."""
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < n_fft:
        raise TooShortError(f"signal of {len(x)} samples is shorter than n_fft={n_fft}")
    frames = sliding_window_view(x, n_fft)[::hop] * _hann(n_fft)
    return np.abs(np.fft.rfft(frames, axis=1)).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS, f_min: float = 0.0, f_max: float | None = None
) -> MelFilterbank:
    """Triangular HTK-mel filters, each scaled to unit area (2 / bandwidth)."""
    if f_max is None:
        f_max = sr / 2
    if not (0 <= f_min < f_max <= sr / 2) or n_mels < 1:
        raise ParameterError(f"need 0 <= f_min < f_max <= sr/2 and n_mels >= 1 (got {f_min}, {f_max}, {n_mels})")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= 2.0 / (upper - lower)
    return MelFilterbank(weights, sr, n_fft, float(f_min), float(f_max), edges[1:-1].copy())


@functools.lru_cache(maxsize=8)
def default_filterbank(sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS) -> MelFilterbank:
    return mel_filterbank(sr, n_fft, n_mels)


def amplitude_to_db(mel: np.ndarray, top_db: float | None = TOP_DB) -> np.ndarray:
    db = 20.0 * np.log10(np.maximum(mel, LOG_EPS))
    if top_db is not None:
        db = np.maximum(db, db.max() - top_db)
    return db


def log_mel(
    w: Waveform, fb: MelFilterbank | None = None, n_fft: int = N_FFT, hop: int = HOP, top_db: float | None = TOP_DB
) -> LogMelSpectrogram:
    if fb is None:
        fb = default_filterbank(w.sample_rate, n_fft)
    mag = stft_magnitude(w, n_fft, hop)
    return LogMelSpectrogram(amplitude_to_db(fb.weights @ mag, top_db), hop / w.sample_rate)


def chunk_samples(seconds: float, sr: int = SAMPLE_RATE) -> int:
    return int(round(seconds * sr))


def chunk_waveform(w: Waveform, chunk_seconds: float = CHUNK_SECONDS, hop_seconds: float | None = None) -> list:
    """Fixed-length chunks; a trailing partial chunk is dropped."""
    size = chunk_samples(chunk_seconds, w.sample_rate)
    step = size if hop_seconds is None else chunk_samples(hop_seconds, w.sample_rate)
    if size < 1 or step < 1:
        raise ParameterError("chunk and hop lengths must be at least one sample")
    if len(w) < size:
        raise TooShortError(f"waveform of {len(w)} samples shorter than one chunk ({size})")
    starts = range(0, len(w) - size + 1, step)
    return [Waveform(w.samples[s : s + size], w.sample_rate) for s in starts]
