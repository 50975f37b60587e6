"""G.711 mu-law companding over 20 ms frames (160 samples at 8 kHz)."""

from __future__ import annotations

import numpy as np

FRAME_SAMPLES = 160
SAMPLE_RATE = 8000

_BIAS = 0x84
_CLIP = 32635


class LengthMismatch(ValueError):
    pass


def _encode_sample(sample: int) -> int:
    sign = 0x80 if sample < 0 else 0
    magnitude = min(-sample if sample < 0 else sample, _CLIP) + _BIAS
    exponent = 7
    mask = 0x4000
    while exponent > 0 and not magnitude & mask:
        exponent -= 1
        mask >>= 1
    mantissa = (magnitude >> (exponent + 3)) & 0x0F
    return ~(sign | (exponent << 4) | mantissa) & 0xFF


def _decode_byte(byte: int) -> int:
    byte = ~byte & 0xFF
    exponent = (byte >> 4) & 0x07
    magnitude = (((byte & 0x0F) << 3) + _BIAS) << exponent
    magnitude -= _BIAS
    return -magnitude if byte & 0x80 else magnitude


# lookup tables: every int16 value -> byte, every byte -> int16
ENCODE_TABLE = np.array([_encode_sample(s) for s in range(-32768, 32768)], dtype=np.uint8)
DECODE_TABLE = np.array([_decode_byte(b) for b in range(256)], dtype=np.int16)


def encode_pcmu(frame) -> bytes:
    samples = np.asarray(frame)
    if samples.shape != (FRAME_SAMPLES,):
        raise LengthMismatch(f"expected {FRAME_SAMPLES} samples, got {samples.shape}")
    return ENCODE_TABLE[samples.astype(np.int32) + 32768].tobytes()


def decode_pcmu(payload: bytes) -> np.ndarray:
    if len(payload) != FRAME_SAMPLES:
        raise LengthMismatch(f"expected {FRAME_SAMPLES} bytes, got {len(payload)}")
    return DECODE_TABLE[np.frombuffer(payload, dtype=np.uint8)]


def encode_samples(samples) -> bytes:
    """Encode any number of samples (no framing check)."""
    return ENCODE_TABLE[np.asarray(samples).astype(np.int32) + 32768].tobytes()


def decode_samples(payload: bytes) -> np.ndarray:
    return DECODE_TABLE[np.frombuffer(payload, dtype=np.uint8)]


SILENCE_BYTE = _encode_sample(0)
SILENCE_PAYLOAD = bytes([SILENCE_BYTE]) * FRAME_SAMPLES
