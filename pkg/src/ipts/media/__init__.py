from .dsp import SILENCE, ToneSource, goertzel_power, mix, tone, tone_energy_db
from .dtmf import DtmfDetector, DtmfEvent, detect_dtmf, event_packets
from .g711 import FRAME_SAMPLES, SAMPLE_RATE, LengthMismatch, decode_pcmu, encode_pcmu
from .mixer import MAX_PARTICIPANTS, ConferenceRoom, RoomFull
from .rtp import RtpPacket, is_rtp
from .session import (
    FileSource,
    MediaPortExhausted,
    PortAllocator,
    RtpSession,
    SilenceSource,
    SocketClosed,
    Ticker,
)
from .wav import FileMissing, WavWriter, read_wav, write_wav

__all__ = [
    "ConferenceRoom",
    "DtmfDetector",
    "DtmfEvent",
    "FRAME_SAMPLES",
    "FileMissing",
    "FileSource",
    "LengthMismatch",
    "MAX_PARTICIPANTS",
    "MediaPortExhausted",
    "PortAllocator",
    "RoomFull",
    "RtpPacket",
    "RtpSession",
    "SAMPLE_RATE",
    "SILENCE",
    "SilenceSource",
    "SocketClosed",
    "Ticker",
    "ToneSource",
    "WavWriter",
    "decode_pcmu",
    "detect_dtmf",
    "encode_pcmu",
    "event_packets",
    "goertzel_power",
    "is_rtp",
    "mix",
    "read_wav",
    "tone",
    "tone_energy_db",
    "write_wav",
]
