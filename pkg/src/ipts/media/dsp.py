"""Frame mixing, tone synthesis and single-bin tone energy."""

from __future__ import annotations

import math

import numpy as np

from .g711 import FRAME_SAMPLES, SAMPLE_RATE, LengthMismatch

SILENCE = np.zeros(FRAME_SAMPLES, dtype=np.int16)


def mix(frames) -> np.ndarray:
    """Saturating per-sample sum of equal-length frames."""
    acc = np.zeros(FRAME_SAMPLES, dtype=np.int32)
    for frame in frames:
        f = np.asarray(frame)
        if f.shape != (FRAME_SAMPLES,):
            raise LengthMismatch(f"expected {FRAME_SAMPLES} samples, got {f.shape}")
        acc += f
    return np.clip(acc, -32768, 32767).astype(np.int16)


def tone(freq: float, seconds: float, amplitude: float = 0.5, *, phase_samples: int = 0
         ) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    t = (np.arange(n) + phase_samples) / SAMPLE_RATE
    return np.round(amplitude * 32767 * np.sin(2 * math.pi * freq * t)).astype(np.int16)


class ToneSource:
    """Endless phase-continuous sine, one frame at a time."""

    def __init__(self, freq: float, amplitude: float = 0.3):
        self.freq = freq
        self.amplitude = amplitude
        self._pos = 0

    def next_frame(self) -> np.ndarray:
        frame = tone(self.freq, FRAME_SAMPLES / SAMPLE_RATE, self.amplitude,
                     phase_samples=self._pos)
        self._pos += FRAME_SAMPLES
        return frame


def goertzel_power(samples, freq: float) -> float:
    """Mean-square amplitude of the ``freq`` component (single-bin Goertzel)."""
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    if n == 0:
        return 0.0
    k = 2 * math.cos(2 * math.pi * freq / SAMPLE_RATE)
    s1 = s2 = 0.0
    for v in x:
        s0 = v + k * s1 - s2
        s2, s1 = s1, s0
    power = s1 * s1 + s2 * s2 - k * s1 * s2
    # a full-scale sine of amplitude A yields |X|^2 ~ (A*n/2)^2
    amplitude = 2 * math.sqrt(max(power, 0.0)) / n
    return amplitude**2 / 2


def tone_energy_db(samples, freq: float) -> float:
    """Tone power relative to a full-scale sine, in dB (0 dB = amplitude 32767)."""
    full_scale = 32767.0**2 / 2
    p = goertzel_power(samples, freq)
    if p <= 0:
        return -200.0
    return 10 * math.log10(p / full_scale)


def frames_of(samples, *, pad: bool = True):
    """Split a sample array into 160-sample frames."""
    arr = np.asarray(samples, dtype=np.int16)
    for start in range(0, len(arr), FRAME_SAMPLES):
        chunk = arr[start:start + FRAME_SAMPLES]
        if len(chunk) < FRAME_SAMPLES:
            if not pad:
                return
            chunk = np.concatenate([chunk, np.zeros(FRAME_SAMPLES - len(chunk), np.int16)])
        yield chunk
