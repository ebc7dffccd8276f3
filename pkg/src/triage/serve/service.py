"""The suggestion workflow: collect features on creation, predict and store,
check staleness on open, and log the agent's final choice.

A stored prediction is keyed by ticket and model version and carries the
hash of the features it was computed from. Opening a ticket re-runs the
model only when that hash no longer matches the ticket's current features,
when the model has been replaced, or when an earlier attempt left the
prediction pending.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import logging
import threading
from pathlib import Path
from typing import Callable

from ..corpus import Ticket
from .store import MemoryStore, Resolution, StoredPrediction, TicketStore

log = logging.getLogger(__name__)

TASKS = ("contact_type", "reply_template")


class NotFound(KeyError):
    pass


class Conflict(ValueError):
    pass


def feature_hash(ticket: Ticket) -> str:
    """Digest of every model-visible field; the id is not a feature."""
    canon = json.dumps(ticket.features(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _utc_now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


class SuggestionService:
    """Serves top-k suggestions for tickets.

    ``predictor(tickets, k)`` must return ``{task: [ranking per ticket]}``
    where each ranking is a list of ``(label, score)``; ``TrainedModel``
    from the pipeline module satisfies this. ``model_calls`` counts every
    predictor invocation, successful or not.
    """

    def __init__(self, predictor, model_version: str, store: TicketStore | None = None, k: int = 3,
                 audit_path=None, clock: Callable[[], str] = _utc_now):
        if k < 1:
            raise ValueError("k must be >= 1")
        self._model = (predictor, model_version)
        self.store = store if store is not None else MemoryStore()
        self.k = k
        self.audit_path = Path(audit_path) if audit_path is not None else None
        self.clock = clock
        self.model_calls = 0
        self._counter_lock = threading.Lock()
        self._locks: dict = {}
        self._locks_guard = threading.Lock()
        self._audit_lock = threading.Lock()

    # -- plumbing ----------------------------------------------------------------
    @property
    def model_version(self) -> str:
        return self._model[1]

    def swap_model(self, predictor, model_version: str) -> None:
        """Replace the model; later requests see the new one, stored predictions go stale lazily."""
        self._model = (predictor, model_version)  # single reference assignment, atomic

    def _lock(self, ticket_id: str) -> threading.Lock:
        with self._locks_guard:
            lock = self._locks.get(ticket_id)
            if lock is None:
                lock = self._locks[ticket_id] = threading.Lock()
            return lock

    def _predict(self, ticket: Ticket) -> StoredPrediction:
        predictor, version = self._model
        h = feature_hash(ticket)
        with self._counter_lock:
            self.model_calls += 1
        try:
            out = predictor([ticket], self.k)
            suggestions = {task: [(str(c), float(s)) for c, s in out[task][0][:self.k]]
                           for task in out}
        except Exception as e:  # model unavailable: keep the ticket, no partial suggestions
            log.warning("prediction for %s failed (%s); marked pending", ticket.id, e)
            return StoredPrediction(ticket.id, {}, h, version, self.clock(), status="pending")
        return StoredPrediction(ticket.id, suggestions, h, version, self.clock())

    # -- workflow ----------------------------------------------------------------
    def on_ticket_created(self, ticket: Ticket) -> StoredPrediction:
        with self._lock(ticket.id):
            if self.store.get_ticket(ticket.id) is not None:
                raise Conflict(f"ticket {ticket.id!r} already exists")
            self.store.put_ticket(ticket)
            pred = self._predict(ticket)
            self.store.put_prediction(pred)
            return pred

    def on_ticket_updated(self, ticket_id: str, changes: dict) -> Ticket:
        """Apply field edits; the model is not called until the ticket is opened."""
        if "id" in changes and changes["id"] != ticket_id:
            raise ValueError("ticket id cannot change")
        with self._lock(ticket_id):
            ticket = self.store.get_ticket(ticket_id)
            if ticket is None:
                raise NotFound(ticket_id)
            allowed = {f.name for f in dataclasses.fields(Ticket)}
            unknown = set(changes) - allowed
            if unknown:
                raise ValueError(f"unknown ticket fields {sorted(unknown)}")
            updated = dataclasses.replace(ticket, **changes)
            self.store.put_ticket(updated)
            return updated

    def on_ticket_opened(self, ticket_id: str) -> StoredPrediction:
        with self._lock(ticket_id):
            ticket = self.store.get_ticket(ticket_id)
            if ticket is None:
                raise NotFound(ticket_id)
            stored = self.store.get_prediction(ticket_id, self.model_version)
            if stored is None or stored.status != "ready" or stored.feature_hash != feature_hash(ticket):
                stored = self._predict(ticket)
            if stored.status == "ready":
                stored = dataclasses.replace(stored, delivered=True)
            self.store.put_prediction(stored)
            return stored

    def on_ticket_resolved(self, ticket_id: str, contact_type: str, reply_template: str) -> Resolution:
        with self._lock(ticket_id):
            if self.store.get_ticket(ticket_id) is None:
                raise NotFound(ticket_id)
            pred = self.store.latest_prediction(ticket_id)
            chosen = {"contact_type": contact_type, "reply_template": reply_template}
            delivered = pred is not None and pred.delivered and pred.status == "ready"
            sugg = pred.suggestions if delivered else {}
            top1, top3 = {}, {}
            for task, label in chosen.items():
                labels = [c for c, _ in sugg.get(task, [])]
                top1[task] = bool(labels) and labels[0] == label
                top3[task] = label in labels[:3]
            res = Resolution(ticket_id, chosen, top1, top3, not delivered,
                             pred.model_version if delivered else None,
                             {t: [[c, s] for c, s in r] for t, r in sugg.items()})
            self.store.add_resolution(res)
            self._audit(res)
            return res

    def _audit(self, res: Resolution) -> None:
        """One line per task in the prediction-dump format plus the chosen value."""
        if self.audit_path is None:
            return
        lines = []
        for task in TASKS:
            lines.append(json.dumps({
                "ticket_id": res.ticket_id,
                "task": task,
                "ranking": res.suggestions.get(task, []),
                "chosen": res.chosen[task],
                "top1": res.top1[task],
                "top3": res.top3[task],
                "no_suggestion": res.no_suggestion,
                "model_version": res.model_version,
            }, sort_keys=True))
        with self._audit_lock, self.audit_path.open("a", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def replay_audit(path) -> dict:
    """Online top-1 and top-3 rates per task, rebuilt from an audit log."""
    totals: dict = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            t = totals.setdefault(r["task"], {"n": 0, "top1": 0, "top3": 0, "no_suggestion": 0})
            t["n"] += 1
            t["top1"] += int(r["top1"])
            t["top3"] += int(r["top3"])
            t["no_suggestion"] += int(r["no_suggestion"])
    return {task: {"n": t["n"], "top1": t["top1"] / t["n"], "top3": t["top3"] / t["n"],
                   "no_suggestion": t["no_suggestion"]} for task, t in totals.items()}
