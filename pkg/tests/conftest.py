"""Shared test doubles and helpers."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from forge.preferences import AblationCandidate, PreferenceCandidate


class ScriptedScorer:
    """Contradiction scorer driven by an explicit (premise, hypothesis) table."""

    def __init__(self, table=None, default=0.0, scorer_id="scripted"):
        self.table = dict(table or {})
        self.default = default
        self.scorer_id = scorer_id
        self.calls = []

    def score(self, premise, hypothesis):
        self.calls.append((premise, hypothesis))
        value = self.table.get((premise, hypothesis), self.default)
        if isinstance(value, Exception):
            raise value
        return value


def make_candidate(instr_id="q1", reference="ref", grounded=("g1", "g2"), ungrounded=("u1", "u2"), chunk="chunk", instruction="what?"):
    return PreferenceCandidate(
        instr_id=instr_id,
        instruction=instruction,
        chunk=chunk,
        grounded_reference=reference,
        grounded_samples=tuple(grounded),
        ungrounded_samples=tuple(ungrounded),
    )


def make_ablation(instr_id="q1", samples=("a", "b", "c"), instruction="what?"):
    return AblationCandidate(instr_id=instr_id, instruction=instruction, samples=tuple(samples))


class _JsonHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        payload = json.loads(self.rfile.read(length) or b"{}")
        status, body = self.server.app(self.path, payload, dict(self.headers))
        encoded = json.dumps(body).encode("utf-8") if not isinstance(body, bytes) else body
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(encoded)))
        self.end_headers()
        self.wfile.write(encoded)

    def log_message(self, *args):
        pass


class LocalHttpService:
    """Tiny threaded HTTP service for exercising the remote-backend clients.

    ``app(path, payload, headers) -> (status, body)`` defines the behavior;
    every request is recorded in ``requests``.
    """

    def __init__(self, app):
        self.requests = []
        self._lock = threading.Lock()

        def recording_app(path, payload, headers):
            with self._lock:
                self.requests.append({"path": path, "payload": payload, "headers": headers})
            return app(path, payload, headers)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), _JsonHandler)
        self.server.app = recording_app
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def base_url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def http_service():
    """Factory fixture: ``http_service(app)`` yields a running LocalHttpService."""
    services = []

    def start(app):
        service = LocalHttpService(app)
        service.__enter__()
        services.append(service)
        return service

    yield start
    for service in services:
        service.__exit__()
