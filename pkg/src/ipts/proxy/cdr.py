"""Call detail records: one CSV row per finished call."""

from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass
from pathlib import Path

CDR_COLUMNS = ["call_id", "caller", "callee", "start_ms", "answer_ms", "end_ms",
               "duration_ms", "disposition"]


class Disposition(str, enum.Enum):
    ANSWERED = "Answered"
    NO_ANSWER = "NoAnswer"
    BUSY = "Busy"
    FAILED = "Failed"
    CANCELLED = "Cancelled"


def disposition_for(code: int, cancelled: bool = False) -> Disposition:
    if 200 <= code < 300:
        return Disposition.ANSWERED
    if cancelled or code == 487:
        return Disposition.CANCELLED
    if code in (486, 600):
        return Disposition.BUSY
    if code in (408, 480):
        return Disposition.NO_ANSWER
    return Disposition.FAILED


@dataclass(frozen=True)
class Cdr:
    call_id: str
    caller_aor: str
    callee_uri: str
    start: int
    end: int
    disposition: Disposition
    answer: int | None = None

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("CDR end precedes start")
        if self.disposition == Disposition.ANSWERED and self.answer is None:
            raise ValueError("answered CDR needs an answer time")

    @property
    def duration_ms(self) -> int:
        if self.disposition == Disposition.ANSWERED and self.answer is not None:
            return self.end - self.answer
        return 0

    def row(self) -> list[str]:
        return [
            self.call_id, self.caller_aor, self.callee_uri, str(self.start),
            "" if self.answer is None else str(self.answer), str(self.end),
            str(self.duration_ms), self.disposition.value,
        ]


def account(events: dict) -> Cdr:
    """Fold the timestamps collected for one call into a CDR.

    ``events`` keys: call_id, caller, callee, start, answer (optional),
    end, final_code, cancelled (optional).
    """
    code = events["final_code"]
    disposition = disposition_for(code, events.get("cancelled", False))
    answer = events.get("answer")
    if disposition != Disposition.ANSWERED:
        answer = None
    return Cdr(
        call_id=events["call_id"],
        caller_aor=events["caller"],
        callee_uri=events["callee"],
        start=events["start"],
        answer=answer,
        end=events["end"],
        disposition=disposition,
    )


class CdrWriter:
    """Single appender; writes the header row when the file is new or empty."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[Cdr] = []

    def append(self, cdr: Cdr) -> None:
        self.records.append(cdr)
        if self.path is None:
            return
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if not self.path.exists() or self.path.stat().st_size == 0:
            writer.writerow(CDR_COLUMNS)
        writer.writerow(cdr.row())
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, buf.getvalue().encode("utf-8"))
        finally:
            os.close(fd)


def read_cdrs(path: str | Path) -> list[Cdr]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(Cdr(
                call_id=row["call_id"],
                caller_aor=row["caller"],
                callee_uri=row["callee"],
                start=int(row["start_ms"]),
                answer=int(row["answer_ms"]) if row["answer_ms"] else None,
                end=int(row["end_ms"]),
                disposition=Disposition(row["disposition"]),
            ))
    return out
