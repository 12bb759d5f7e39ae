"""Waveform augmentation chain.

Eight transforms applied in a fixed order, each switched on independently
with its own probability. Parameter ranges are sampled uniformly per call.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy.signal import lfilter

from .dsp import Waveform, resample_ratio
from .errors import ParameterError

ORDER = ("polarity", "noise", "gain", "high_pass", "low_pass", "delay", "pitch_shift", "reverb")

DEFAULT_RANGES = {
    "polarity": (0.0, 0.0),
    "noise": (0.3, 0.5),  # k_snr, noise RMS relative to signal RMS
    "gain": (-20.0, -1.0),  # dB
    "high_pass": (2200.0, 4000.0),  # Hz
    "low_pass": (200.0, 1200.0),  # Hz
    "delay": (200.0, 500.0),  # ms
    "pitch_shift": (-7.0, 7.0),  # semitones, integer draws
    "reverb": (0.0, 100.0),  # room size
}

DELAY_MIX = 0.5
COMB_MS = (29.7, 37.1, 41.1, 43.7)
ALLPASS_MS = (5.0, 1.7)
ALLPASS_GAIN = 0.7
WET, DRY = 0.3, 0.7


@dataclass
class TransformSpec:
    enabled: bool = True
    p: float | None = None  # None: drawn from AugmentSpec.p_range when the chain is built
    low: float = 0.0
    high: float = 0.0


def _default_transforms():
    return {name: TransformSpec(low=lo, high=hi) for name, (lo, hi) in DEFAULT_RANGES.items()}


@dataclass
class AugmentSpec:
    transforms: dict = field(default_factory=_default_transforms)
    p_range: tuple = (0.3, 0.7)

    def __post_init__(self):
        self.validate()

    def validate(self):
        lo, hi = self.p_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ParameterError(f"p_range must satisfy 0 <= low <= high <= 1, got {self.p_range}")
        unknown = set(self.transforms) - set(ORDER)
        if unknown:
            raise ParameterError(f"unknown transforms: {sorted(unknown)}")
        for name, t in self.transforms.items():
            if t.low > t.high:
                raise ParameterError(f"{name}: empty range ({t.low}, {t.high})")
            if t.p is not None and not 0.0 <= t.p <= 1.0:
                raise ParameterError(f"{name}: probability {t.p} outside [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        spec = cls()
        for t in spec.transforms.values():
            t.enabled = False
        return spec

    @classmethod
    def with_probabilities(cls, probs: dict, default: float = 0.0) -> "AugmentSpec":
        spec = cls()
        for name, t in spec.transforms.items():
            t.p = probs.get(name, default)
        return spec


@dataclass
class AugmentChain:
    spec: AugmentSpec
    probabilities: dict
    seed: int

    @classmethod
    def build(cls, spec: AugmentSpec, seed: int = 0) -> "AugmentChain":
        rng = np.random.default_rng([seed, 0xA06])
        probs = {}
        for name in ORDER:
            t = spec.transforms.get(name, TransformSpec(enabled=False))
            drawn = rng.uniform(*spec.p_range)
            if not t.enabled:
                probs[name] = 0.0
            else:
                probs[name] = float(drawn if t.p is None else t.p)
        return cls(spec, probs, seed)

    def sample(self, rng: np.random.Generator) -> list:
        """Draw which transforms fire and their parameters: [(name, value), ...]."""
        plan = []
        for name in ORDER:
            fire = rng.random() < self.probabilities[name]
            t = self.spec.transforms.get(name)
            if not fire:
                continue
            if name == "pitch_shift":
                value = int(rng.integers(int(np.ceil(t.low)), int(np.floor(t.high)) + 1))
            else:
                value = float(rng.uniform(t.low, t.high))
            plan.append((name, value))
        return plan


# -- transforms -----------------------------------------------------------


def polarity_inversion(w: Waveform) -> Waveform:
    return Waveform(-w.samples, w.sample_rate)


def additive_noise(w: Waveform, k_snr: float, rng: np.random.Generator) -> Waveform:
    """Add white Gaussian noise whose RMS is ``k_snr`` times the signal RMS."""
    if k_snr <= 0:
        raise ParameterError(f"k_snr must be positive, got {k_snr}")
    level = np.sqrt(np.mean(np.square(w.samples)))
    if level == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    noise = rng.standard_normal(len(w))
    noise *= k_snr * level / np.sqrt(np.mean(noise * noise))
    return Waveform(w.samples + noise, w.sample_rate)


def random_gain(w: Waveform, gain_db: float) -> Waveform:
    return Waveform(w.samples * 10.0 ** (gain_db / 20.0), w.sample_rate)


def biquad_coefficients(kind: str, cutoff_hz: float, sr: int, q: float = 1 / np.sqrt(2)):
    """Second-order Butterworth (RBJ cookbook) low/high-pass coefficients (b, a)."""
    nyq = sr / 2
    f0 = min(max(cutoff_hz, 1e-3), nyq * 0.999)
    w0 = 2 * np.pi * f0 / sr
    cos, alpha = np.cos(w0), np.sin(w0) / (2 * q)
    if kind == "low":
        b = np.array([(1 - cos) / 2, 1 - cos, (1 - cos) / 2])
    elif kind == "high":
        b = np.array([(1 + cos) / 2, -(1 + cos), (1 + cos) / 2])
    else:
        raise ParameterError(f"unknown filter kind {kind!r}")
    a = np.array([1 + alpha, -2 * cos, 1 - alpha])
    return b / a[0], a / a[0]


def high_pass(w: Waveform, cutoff_hz: float) -> Waveform:
    b, a = biquad_coefficients("high", cutoff_hz, w.sample_rate)
    return Waveform(lfilter(b, a, w.samples), w.sample_rate)


def low_pass(w: Waveform, cutoff_hz: float) -> Waveform:
    b, a = biquad_coefficients("low", cutoff_hz, w.sample_rate)
    return Waveform(lfilter(b, a, w.samples), w.sample_rate)


def delay(w: Waveform, delay_ms: float, mix: float = DELAY_MIX) -> Waveform:
    """Single echo: y[n] = (x[n] + mix * x[n - d]) / (1 + mix)."""
    d = int(round(delay_ms * w.sample_rate / 1000.0))
    x = w.samples
    y = x.astype(np.float64, copy=True)
    if 0 < d < len(x):
        y[d:] += mix * x[:-d]
    return Waveform(y / (1.0 + mix), w.sample_rate)


def pitch_shift(w: Waveform, semitones: int) -> Waveform:
    """Shift pitch by resampling; the result is cropped or zero-padded to the input length."""
    if semitones == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(2.0 ** (-semitones / 12.0)).limit_denominator(200)
    y = resample_ratio(w.samples, ratio)
    n = len(w)
    y = y[:n] if len(y) >= n else np.pad(y, (0, n - len(y)))
    return Waveform(y, w.sample_rate)


def _feedback_comb(x: np.ndarray, d: int, g: float) -> np.ndarray:
    # y[n] = x[n] + g * y[n - d], evaluated one delay-length block at a time
    y = x.astype(np.float64, copy=True)
    for start in range(d, len(y), d):
        stop = min(start + d, len(y))
        y[start:stop] += g * y[start - d : stop - d]
    return y


def _allpass(x: np.ndarray, d: int, g: float) -> np.ndarray:
    # y[n] = -g x[n] + x[n - d] + g y[n - d]
    v = -g * x
    v[d:] += x[:-d]
    return _feedback_comb(v, d, g)


def reverb_parameters(room_size: float, sr: int):
    frac = float(np.clip(room_size, 0.0, 100.0)) / 100.0
    feedback = 0.70 + 0.22 * frac
    stretch = 1.0 + 0.5 * frac
    combs = [max(1, int(round(ms * stretch * sr / 1000.0))) for ms in COMB_MS]
    allpasses = [max(1, int(round(ms * sr / 1000.0))) for ms in ALLPASS_MS]
    return feedback, combs, allpasses


def reverb(w: Waveform, room_size: float) -> Waveform:
    """Schroeder reverberator: 4 parallel feedback combs, then 2 all-passes."""
    feedback, combs, allpasses = reverb_parameters(room_size, w.sample_rate)
    x = w.samples.astype(np.float64)
    wet = sum(_feedback_comb(x, d, feedback) for d in combs) / len(combs)
    for d in allpasses:
        wet = _allpass(wet, d, ALLPASS_GAIN)
    return Waveform(DRY * x + WET * wet, w.sample_rate)


def apply_transform(w: Waveform, name: str, value, rng: np.random.Generator) -> Waveform:
    if name == "polarity":
        return polarity_inversion(w)
    if name == "noise":
        return additive_noise(w, value, rng)
    if name == "gain":
        return random_gain(w, value)
    if name == "high_pass":
        return high_pass(w, value)
    if name == "low_pass":
        return low_pass(w, value)
    if name == "delay":
        return delay(w, value)
    if name == "pitch_shift":
        return pitch_shift(w, int(value))
    if name == "reverb":
        return reverb(w, value)
    raise ParameterError(f"unknown transform {name!r}")


def apply_chain(w: Waveform, chain: AugmentChain, rng: np.random.Generator) -> Waveform:
    out = w
    for name, value in chain.sample(rng):
        out = apply_transform(out, name, value, rng)
    return Waveform(np.clip(out.samples, -1.0, 1.0), w.sample_rate)


def spec_with(spec: AugmentSpec, **overrides) -> AugmentSpec:
    """Copy of ``spec`` with per-transform fields replaced, e.g. ``noise={"p": 1.0}``."""
    transforms = {k: replace(v) for k, v in spec.transforms.items()}
    for name, fields in overrides.items():
        transforms[name] = replace(transforms[name], **fields)
    return AugmentSpec(transforms, spec.p_range)
