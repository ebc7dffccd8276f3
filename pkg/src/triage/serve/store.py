"""Ticket storage for the suggestion service.

``TicketStore`` is the interface; ``MemoryStore`` keeps everything in
dictionaries and ``LogStore`` adds durability with an append-only JSON-lines
event log plus periodic snapshots. A snapshot records how many log lines it
covers, so recovery loads the snapshot and replays only the tail. The log is
never rewritten.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..corpus import Ticket


@dataclass
class StoredPrediction:
    ticket_id: str
    suggestions: dict  # task -> [(label, score), ...], at most k entries
    feature_hash: str
    model_version: str
    created_at: str
    status: str = "ready"  # or "pending" when the model could not be reached
    delivered: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["suggestions"] = {t: [[c, float(s)] for c, s in r] for t, r in self.suggestions.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StoredPrediction":
        d = dict(d)
        d["suggestions"] = {t: [(c, float(s)) for c, s in r] for t, r in d["suggestions"].items()}
        return cls(**d)


@dataclass
class Resolution:
    ticket_id: str
    chosen: dict  # task -> chosen label
    top1: dict  # task -> bool
    top3: dict  # task -> bool
    no_suggestion: bool
    model_version: str | None
    suggestions: dict = field(default_factory=dict)


class TicketStore:
    """Storage interface. Implementations must be safe for concurrent use."""

    def get_ticket(self, ticket_id: str) -> Ticket | None:
        raise NotImplementedError

    def put_ticket(self, ticket: Ticket) -> None:
        raise NotImplementedError

    def get_prediction(self, ticket_id: str, model_version: str) -> StoredPrediction | None:
        raise NotImplementedError

    def put_prediction(self, pred: StoredPrediction) -> None:
        """Store ``pred`` as the only live prediction for its ticket."""
        raise NotImplementedError

    def latest_prediction(self, ticket_id: str) -> StoredPrediction | None:
        raise NotImplementedError

    def add_resolution(self, res: Resolution) -> None:
        raise NotImplementedError

    def resolutions(self) -> list:
        raise NotImplementedError


class MemoryStore(TicketStore):
    def __init__(self):
        self._lock = threading.Lock()
        self.tickets: dict = {}
        self.predictions: dict = {}  # ticket id -> StoredPrediction
        self._resolutions: list = []

    def get_ticket(self, ticket_id):
        with self._lock:
            return self.tickets.get(ticket_id)

    def put_ticket(self, ticket):
        with self._lock:
            self.tickets[ticket.id] = ticket
            self._record("ticket", asdict(ticket))

    def get_prediction(self, ticket_id, model_version):
        with self._lock:
            p = self.predictions.get(ticket_id)
        return p if p is not None and p.model_version == model_version else None

    def latest_prediction(self, ticket_id):
        with self._lock:
            return self.predictions.get(ticket_id)

    def put_prediction(self, pred):
        with self._lock:
            self.predictions[pred.ticket_id] = pred
            self._record("prediction", pred.to_dict())

    def add_resolution(self, res):
        with self._lock:
            self._resolutions.append(res)
            self._record("resolution", asdict(res))

    def resolutions(self):
        with self._lock:
            return list(self._resolutions)

    def _record(self, kind: str, payload: dict) -> None:
        """Hook for durable subclasses; called with the store lock held."""

    def _apply(self, kind: str, payload: dict) -> None:
        if kind == "ticket":
            t = Ticket(**payload)
            self.tickets[t.id] = t
        elif kind == "prediction":
            p = StoredPrediction.from_dict(payload)
            self.predictions[p.ticket_id] = p
        elif kind == "resolution":
            self._resolutions.append(Resolution(**payload))
        else:
            raise ValueError(f"unknown store event {kind!r}")


class LogStore(MemoryStore):
    """``MemoryStore`` persisted to ``directory/events.jsonl`` and ``snapshot.json``."""

    def __init__(self, directory, snapshot_every: int = 1000):
        super().__init__()
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.dir / "events.jsonl"
        self.snap_path = self.dir / "snapshot.json"
        self.snapshot_every = snapshot_every
        self.n_events = 0
        self._since_snapshot = 0
        self._recover()
        self._fh = self.log_path.open("a", encoding="utf-8")

    def _recover(self) -> None:
        covered = 0
        if self.snap_path.exists():
            snap = json.loads(self.snap_path.read_text(encoding="utf-8"))
            covered = snap["log_lines"]
            for t in snap["tickets"]:
                self._apply("ticket", t)
            for p in snap["predictions"]:
                self._apply("prediction", p)
            for r in snap["resolutions"]:
                self._apply("resolution", r)
        if self.log_path.exists():
            good = 0
            with self.log_path.open("rb") as fh:
                for i, raw in enumerate(fh):
                    if not raw.endswith(b"\n"):
                        break  # torn final write; everything before it is intact
                    if i >= covered:
                        ev = json.loads(raw)
                        self._apply(ev["kind"], ev["data"])
                    self.n_events = i + 1
                    good += len(raw)
            if good < self.log_path.stat().st_size:
                os.truncate(self.log_path, good)  # so the next append starts on a fresh line
        self._since_snapshot = self.n_events - covered

    def _record(self, kind, payload):
        self._fh.write(json.dumps({"kind": kind, "data": payload}, sort_keys=True) + "\n")
        self._fh.flush()
        self.n_events += 1
        self._since_snapshot += 1
        if self._since_snapshot >= self.snapshot_every:
            self._write_snapshot()

    def _write_snapshot(self) -> None:
        os.fsync(self._fh.fileno())
        snap = {
            "log_lines": self.n_events,
            "tickets": [asdict(t) for t in self.tickets.values()],
            "predictions": [p.to_dict() for p in self.predictions.values()],
            "resolutions": [asdict(r) for r in self._resolutions],
        }
        tmp = self.snap_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(snap, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self.snap_path)
        self._since_snapshot = 0

    def snapshot(self) -> None:
        with self._lock:
            self._write_snapshot()

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()
