"""Conference room: N-1 mixing of the latest frame from each participant."""

from __future__ import annotations

import numpy as np

from .dsp import SILENCE, mix
from .g711 import FRAME_SAMPLES, decode_pcmu
from .rtp import RtpPacket
from .session import RtpSession, Ticker

MAX_PARTICIPANTS = 8


class RoomFull(RuntimeError):
    pass


class ConferenceRoom:
    def __init__(self, name: str, capacity: int = MAX_PARTICIPANTS):
        self.name = name
        self.capacity = capacity
        self.participants: list[RtpSession] = []
        self._latest: dict[int, np.ndarray] = {}
        self._listeners: dict[int, object] = {}
        self._ticker = Ticker(self.tick)

    def __len__(self) -> int:
        return len(self.participants)

    def add(self, session: RtpSession) -> None:
        if len(self.participants) >= self.capacity:
            raise RoomFull(self.name)
        key = id(session)

        def collect(pkt: RtpPacket, addr) -> None:
            if pkt.payload_type == 0 and len(pkt.payload) == FRAME_SAMPLES:
                self._latest[key] = decode_pcmu(pkt.payload)

        self._listeners[key] = collect
        session.listeners.append(collect)
        session.mode = "mixer"
        self.participants.append(session)
        self._ticker.start()

    def remove(self, session: RtpSession) -> None:
        if session not in self.participants:
            return
        self.participants.remove(session)
        key = id(session)
        self._latest.pop(key, None)
        listener = self._listeners.pop(key, None)
        if listener in session.listeners:
            session.listeners.remove(listener)
        if not self.participants:
            self._ticker.stop()

    def mix_for(self, frames: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        """What each participant hears: everyone's frame except their own."""
        out = {}
        for s in self.participants:
            others = [f for k, f in frames.items() if k != id(s)]
            out[id(s)] = mix(others) if others else SILENCE
        return out

    def tick(self) -> None:
        frames, self._latest = self._latest, {}
        mixes = self.mix_for(frames)
        for s in list(self.participants):
            if not s.closed:
                s.send_frame(mixes[id(s)])

    def close(self) -> None:
        self._ticker.stop()
        for s in list(self.participants):
            self.remove(s)
