"""WAV I/O restricted to PCM16 LE, 8 kHz, mono."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .g711 import SAMPLE_RATE


class FileMissing(FileNotFoundError):
    pass


class UnsupportedWav(ValueError):
    pass


def read_wav(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileMissing(str(path))
    with wave.open(str(path), "rb") as w:
        if (w.getnchannels(), w.getsampwidth(), w.getframerate()) != (1, 2, SAMPLE_RATE):
            raise UnsupportedWav(
                f"{path}: need mono 16-bit {SAMPLE_RATE} Hz, got "
                f"{w.getnchannels()}ch {8 * w.getsampwidth()}bit {w.getframerate()} Hz"
            )
        data = w.readframes(w.getnframes())
    return np.frombuffer(data, dtype="<i2").astype(np.int16)


def write_wav(path: str | Path, samples) -> None:
    with WavWriter(path) as out:
        out.write(samples)


class WavWriter:
    """Incremental writer; the RIFF sizes are fixed up on close."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._wave = wave.open(str(self.path), "wb")
        self._wave.setnchannels(1)
        self._wave.setsampwidth(2)
        self._wave.setframerate(SAMPLE_RATE)
        self.samples_written = 0

    def write(self, samples) -> None:
        arr = np.asarray(samples, dtype="<i2")
        self._wave.writeframes(arr.tobytes())
        self.samples_written += len(arr)

    @property
    def duration_ms(self) -> int:
        return self.samples_written * 1000 // SAMPLE_RATE

    def close(self) -> None:
        self._wave.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
