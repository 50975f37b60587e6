"""Reference implementations written independently of the package, used as test oracles."""

from __future__ import annotations

import hashlib
import math
import re
from pathlib import Path

import numpy as np

CORPUS_DIR = Path(__file__).parent / "corpus"

_COMPACT = {"v": "Via", "f": "From", "t": "To", "i": "Call-ID", "m": "Contact",
            "c": "Content-Type", "l": "Content-Length", "s": "Subject", "k": "Supported",
            "e": "Content-Encoding"}


def corpus() -> list[tuple[str, bytes]]:
    return [(p.stem, p.read_bytes()) for p in sorted(CORPUS_DIR.glob("*.sip"))]


def sample(name: str) -> bytes:
    """Corpus message by name, ignoring the numeric prefix."""
    (path,) = CORPUS_DIR.glob(f"[0-9][0-9]-{name}.sip")
    return path.read_bytes()


def oracle_parse(raw: bytes) -> dict:
    """Minimal regex parser: start line, ordered header list, body."""
    m = re.match(rb"(.*?)\r\n(.*?)\r\n\r\n(.*)\Z", raw, re.S)
    assert m, "no header/body separator"
    start = m.group(1).decode()
    header_block = m.group(2).decode()
    body = m.group(3)
    out: dict = {"headers": []}
    resp = re.fullmatch(r"SIP/2\.0 (\d{3}) (.*)", start)
    if resp:
        out["kind"], out["code"], out["reason"] = "response", int(resp.group(1)), resp.group(2)
    else:
        req = re.fullmatch(r"([A-Za-z]+) (\S+) SIP/2\.0", start)
        assert req, start
        out["kind"], out["method"], out["uri"] = "request", req.group(1), req.group(2)
    length = None
    for line in header_block.split("\r\n"):
        name, value = re.fullmatch(r"([^:\s]+)\s*:\s*(.*?)\s*", line).groups()
        name = _COMPACT.get(name, name)
        if name.lower() == "content-length":
            length = int(value)
            continue
        if name.lower() == "via":
            out["headers"] += [(name, part.strip()) for part in value.split(",")]
        else:
            out["headers"].append((name, value))
    out["body"] = body if length is None else body[:length]
    return out


# --- G.711 mu-law ----------------------------------------------------------

def mulaw_decode_table() -> np.ndarray:
    """Decode table built from the segment/mantissa definition of the codec.

    Code word bits (after inversion): sign(1) segment(3) mantissa(4). In
    14-bit units a code decodes to (2m+33)*2^seg - 33; scaled by 4 to 16 bits.
    """
    table = np.zeros(256, dtype=np.int32)
    for code in range(256):
        inv = code ^ 0xFF
        sign = -1 if inv & 0x80 else 1
        seg = (inv >> 4) & 0x7
        mant = inv & 0xF
        table[code] = sign * 4 * ((2 * mant + 33) * (1 << seg) - 33)
    return table


def mulaw_step(decoded_code: int) -> int:
    """Quantization step (16-bit units) of the segment a code word belongs to."""
    seg = ((int(decoded_code) ^ 0xFF) >> 4) & 0x7
    return 1 << (seg + 3)


# --- digest ----------------------------------------------------------------

def digest(username: str, realm: str, password: str, nonce: str, method: str, uri: str) -> str:
    h = lambda s: hashlib.md5(s.encode()).hexdigest()  # noqa: E731
    return h(f"{h(f'{username}:{realm}:{password}')}:{nonce}:{h(f'{method}:{uri}')}")


# --- tones -----------------------------------------------------------------

def sine(freq: float, n: int, amplitude: float, rate: int = 8000) -> np.ndarray:
    t = np.arange(n) / rate
    return np.round(amplitude * 32767 * np.sin(2 * np.pi * freq * t)).astype(np.int16)


def dft_bin_db(samples, freq: float, rate: int = 8000) -> float:
    """Tone level by direct correlation, dB relative to a full-scale sine."""
    x = np.asarray(samples, dtype=np.float64)
    t = np.arange(len(x)) / rate
    c = np.dot(x, np.cos(2 * np.pi * freq * t))
    s = np.dot(x, np.sin(2 * np.pi * freq * t))
    amp = 2 * math.hypot(c, s) / len(x)
    return 20 * math.log10(max(amp, 1e-12) / 32767)


# --- status classes --------------------------------------------------------

STATUS_CLASSES = [
    (100, 199, "Provisional"),
    (200, 299, "Success"),
    (300, 399, "Redirection"),
    (400, 499, "Client Error"),
    (500, 599, "Server Error"),
    (600, 699, "Global Failure"),
]


def status_class_name(code: int) -> str:
    for lo, hi, name in STATUS_CLASSES:
        if lo <= code <= hi:
            return name
    raise ValueError(code)
