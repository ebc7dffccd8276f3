"""Online suggestion service: ticket store, staleness-aware predictions, HTTP front end."""

from .http import make_server, serve_forever
from .service import Conflict, NotFound, SuggestionService, feature_hash, replay_audit
from .store import LogStore, MemoryStore, Resolution, StoredPrediction, TicketStore

__all__ = [
    "Conflict", "LogStore", "MemoryStore", "NotFound", "Resolution", "StoredPrediction",
    "SuggestionService", "TicketStore", "feature_hash", "make_server", "replay_audit", "serve_forever",
]
