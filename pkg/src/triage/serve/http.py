"""JSON-over-HTTP front end for ``SuggestionService``.

Routes:
  POST /tickets                       create a ticket, returns its suggestions (201)
  POST /tickets/{id}                  update fields of a ticket (200)
  GET  /tickets/{id}/suggestions      open a ticket: current top-k suggestions (200)
  POST /tickets/{id}/resolution       record the agent's choice (200)

Errors come back as ``{"error": message}`` with 400 (bad body), 404
(unknown ticket or route) or 409 (duplicate create).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from ..corpus import Ticket
from .service import Conflict, NotFound, SuggestionService
from .store import LogStore

log = logging.getLogger(__name__)

_TICKET = re.compile(r"^/tickets/([^/]+)$")
_SUGGEST = re.compile(r"^/tickets/([^/]+)/suggestions$")
_RESOLVE = re.compile(r"^/tickets/([^/]+)/resolution$")


class BadRequest(ValueError):
    pass


def ticket_from_json(body: dict) -> Ticket:
    if not isinstance(body, dict):
        raise BadRequest("ticket body must be a JSON object")
    names = [f.name for f in dataclasses.fields(Ticket)]
    missing = [n for n in names if n not in body]
    if missing:
        raise BadRequest(f"missing ticket fields {missing}")
    unknown = sorted(set(body) - set(names))
    if unknown:
        raise BadRequest(f"unknown ticket fields {unknown}")
    try:
        return Ticket(**{n: body[n] for n in names})
    except (TypeError, ValueError) as e:
        raise BadRequest(str(e)) from None


def prediction_body(pred) -> dict:
    return {
        "ticket_id": pred.ticket_id,
        "status": pred.status,
        "model_version": pred.model_version,
        "feature_hash": pred.feature_hash,
        "suggestions": {t: [{"label": c, "score": s} for c, s in r] for t, r in pred.suggestions.items()},
    }


def make_handler(service: SuggestionService):
    class Handler(BaseHTTPRequestHandler):
        server_version = "triage/1"

        def log_message(self, fmt, *args):
            log.info("%s %s", self.address_string(), fmt % args)

        def _send(self, code: int, body: dict) -> None:
            data = json.dumps(body, sort_keys=True).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self):
            n = int(self.headers.get("Content-Length") or 0)
            try:
                return json.loads(self.rfile.read(n) or b"null")
            except ValueError:
                raise BadRequest("body is not valid JSON") from None

        def _dispatch(self, fn):
            try:
                code, body = fn()
            except BadRequest as e:
                code, body = 400, {"error": str(e)}
            except NotFound as e:
                code, body = 404, {"error": f"unknown ticket {e.args[0]!r}"}
            except Conflict as e:
                code, body = 409, {"error": str(e)}
            except (TypeError, ValueError) as e:
                code, body = 400, {"error": str(e)}
            self._send(code, body)

        def do_GET(self):
            m = _SUGGEST.match(self.path)
            if not m:
                return self._send(404, {"error": "no such route"})
            self._dispatch(lambda: (200, prediction_body(service.on_ticket_opened(m.group(1)))))

        def do_POST(self):
            if self.path == "/tickets":
                return self._dispatch(self._create)
            m = _RESOLVE.match(self.path)
            if m:
                return self._dispatch(lambda: self._resolve(m.group(1)))
            m = _TICKET.match(self.path)
            if m:
                return self._dispatch(lambda: self._update(m.group(1)))
            self._send(404, {"error": "no such route"})

        def _create(self):
            pred = service.on_ticket_created(ticket_from_json(self._body()))
            return 201, prediction_body(pred)

        def _update(self, ticket_id):
            changes = self._body()
            if not isinstance(changes, dict):
                raise BadRequest("update body must be a JSON object")
            t = service.on_ticket_updated(ticket_id, changes)
            return 200, {"ticket_id": t.id, "ticket": dataclasses.asdict(t)}

        def _resolve(self, ticket_id):
            body = self._body()
            if not isinstance(body, dict) or not {"contact_type", "reply_template"} <= set(body):
                raise BadRequest("resolution needs contact_type and reply_template")
            res = service.on_ticket_resolved(ticket_id, str(body["contact_type"]), str(body["reply_template"]))
            return 200, dataclasses.asdict(res)

    return Handler


def make_server(service: SuggestionService, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """A threaded server; port 0 picks a free port (see ``server.server_address``)."""
    return ThreadingHTTPServer((host, port), make_handler(service))


def serve_forever(cfg, host: str, port: int, store_dir=None) -> None:
    """Serve the model trained under ``cfg.output_dir``."""
    from ..pipeline import TrainedModel

    out = Path(cfg.output_dir)
    model = TrainedModel.load(out / "model", cfg.family)
    store = LogStore(Path(store_dir) if store_dir else out / "store")
    service = SuggestionService(model.predict_topk, cfg.hash()[:12], store,
                                k=cfg.evaluation.get("top_k", 3), audit_path=store.dir / "audit.jsonl")
    server = make_server(service, host, port)
    log.warning("serving on http://%s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        store.close()
