"""Time sources: the asyncio loop for live runs, a virtual clock for unit tests."""

from __future__ import annotations

import asyncio
import heapq
import itertools
import time


class AsyncioClock:
    """Wall-clock time with timers scheduled on the running event loop."""

    def __init__(self, loop: asyncio.AbstractEventLoop | None = None):
        self._loop = loop

    @property
    def loop(self) -> asyncio.AbstractEventLoop:
        if self._loop is None:
            self._loop = asyncio.get_running_loop()
        return self._loop

    def time(self) -> float:
        return time.time()

    def call_later(self, delay: float, callback, *args):
        return self.loop.call_later(max(0.0, delay), callback, *args)


class _VirtualHandle:
    __slots__ = ("when", "callback", "args", "cancelled")

    def __init__(self, when, callback, args):
        self.when = when
        self.callback = callback
        self.args = args
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class VirtualClock:
    """Deterministic clock; timers only fire inside :meth:`advance`."""

    def __init__(self, start: float = 1_700_000_000.0):
        self._now = start
        self._queue: list = []
        self._seq = itertools.count()

    def time(self) -> float:
        return self._now

    def call_later(self, delay: float, callback, *args) -> _VirtualHandle:
        handle = _VirtualHandle(self._now + max(0.0, delay), callback, args)
        heapq.heappush(self._queue, (handle.when, next(self._seq), handle))
        return handle

    def advance(self, seconds: float) -> None:
        target = self._now + seconds
        while self._queue and self._queue[0][0] <= target:
            when, _, handle = heapq.heappop(self._queue)
            if handle.cancelled:
                continue
            self._now = max(self._now, when)
            handle.callback(*handle.args)
        self._now = target

    @property
    def pending(self) -> int:
        return sum(1 for _, _, h in self._queue if not h.cancelled)
