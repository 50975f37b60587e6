"""Synthesized audio prompts so a fresh install has something to play."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..media.dsp import tone
from ..media.wav import write_wav

MOH = "moh.wav"
VM_GREETING = "vm_greeting.wav"
IVR_GREETING = "ivr_greeting.wav"
IVR_INVALID = "ivr_invalid.wav"

# a short arpeggio for hold music; greetings are two-tone beeps
_MOH_NOTES = (523.25, 659.25, 783.99, 659.25)


def _notes(freqs, seconds_each: float, amplitude: float) -> np.ndarray:
    return np.concatenate([tone(f, seconds_each, amplitude) for f in freqs])


def synthesize(name: str) -> np.ndarray:
    if name == MOH:
        return _notes(_MOH_NOTES, 0.25, 0.3)
    if name == VM_GREETING:
        return _notes((600.0, 800.0), 0.25, 0.3)
    if name == IVR_GREETING:
        return _notes((700.0, 900.0, 700.0), 0.2, 0.3)
    if name == IVR_INVALID:
        return _notes((300.0,), 0.3, 0.3)
    raise KeyError(name)


def ensure_prompts(directory: str | Path) -> dict[str, Path]:
    """Write any missing prompt files into ``directory``; return their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {}
    for name in (MOH, VM_GREETING, IVR_GREETING, IVR_INVALID):
        path = directory / name
        if not path.exists():
            write_wav(path, synthesize(name))
        out[name] = path
    return out
