"""HTTP scan service speaking the one-endpoint hard-label protocol.

``POST /scan`` takes raw file bytes and answers ``{"label": "malicious"}``
or ``{"label": "benign"}``; ``GET /health`` answers ``{"status": "ok"}``.
An optional artificial delay is applied before every response so clients
can be exercised against slow scanners. The service keeps no state
besides its configuration: identical bodies always get identical labels.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .models import ByteMean, NameBlocklist


class BindError(Exception):
    """The listen address could not be bound."""


@dataclass(frozen=True)
class ServiceConfig:
    model: ByteMean | NameBlocklist
    listen_addr: str = "127.0.0.1:8080"
    artificial_delay: float = 0.0  # seconds, applied before each response

    def __post_init__(self):
        if not isinstance(self.model, (ByteMean, NameBlocklist)):
            raise ValueError(f"model must be ByteMean or NameBlocklist, got {self.model!r}")
        host, sep, port = self.listen_addr.rpartition(":")
        if not sep or not host:
            raise ValueError(f"listen_addr must be host:port, got {self.listen_addr!r}")
        try:
            port_num = int(port)
        except ValueError:
            raise ValueError(f"listen_addr port must be an integer, got {port!r}") from None
        if not 0 <= port_num <= 65535:
            raise ValueError(f"listen_addr port out of range: {port_num}")
        if self.artificial_delay < 0:
            raise ValueError(f"artificial_delay must be >= 0, got {self.artificial_delay}")

    @property
    def host(self) -> str:
        return self.listen_addr.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.listen_addr.rpartition(":")[2])


def _make_handler(cfg: ServiceConfig) -> type[BaseHTTPRequestHandler]:
    model = cfg.model
    delay = cfg.artificial_delay

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _respond(self, status: int, body: dict) -> None:
            if delay:
                time.sleep(delay)
            payload = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def do_GET(self):
            if self.path == "/health":
                self._respond(200, {"status": "ok"})
            else:
                self._respond(404, {"error": "not found"})

        def do_POST(self):
            if self.path != "/scan":
                self._respond(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length)
            label = "malicious" if model.is_malicious(body) else "benign"
            self._respond(200, {"label": label})

        def log_message(self, format, *args):  # noqa: A002 - base class signature
            pass

    return Handler


class RunningService:
    """Handle for a served instance: address, shutdown, context manager."""

    def __init__(self, httpd: ThreadingHTTPServer, thread: threading.Thread):
        self._httpd = httpd
        self._thread = thread

    @property
    def host(self) -> str:
        return self._httpd.server_address[0]

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def close(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)

    def wait(self) -> None:
        """Block until the server thread exits (i.e. until close())."""
        self._thread.join()

    def __enter__(self) -> "RunningService":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def serve(cfg: ServiceConfig) -> RunningService:
    """Bind the configured address and serve in a background thread.

    Port 0 picks a free port; the handle's ``url`` reports the real one.
    """
    try:
        httpd = ThreadingHTTPServer((cfg.host, cfg.port), _make_handler(cfg))
    except OSError as exc:
        raise BindError(f"cannot bind {cfg.listen_addr}: {exc}") from exc
    thread = threading.Thread(target=httpd.serve_forever, daemon=True, name="scanserve")
    thread.start()
    return RunningService(httpd, thread)
