import numpy as np


def sine(freq, seconds, sr=22050, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t + phase)


def peak_hz(x, sr):
    """Frequency of the largest FFT bin (Hann-windowed)."""
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    return np.argmax(spec) * sr / len(x)


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))
