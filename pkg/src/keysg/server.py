"""Local HTTP query endpoint: ``POST /query {"q": ..., "mode": "parsed"|"raw"}``."""

from __future__ import annotations

import json
import logging
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import KeySGError
from .graph import SceneGraph
from .providers.base import Provider
from .ragindex import ChunkIndex, answer

log = logging.getLogger(__name__)


def make_handler(graph: SceneGraph, index: ChunkIndex, provider: Provider, rag_cfg=None):
    k = getattr(rag_cfg, "k", 5)
    budget = getattr(rag_cfg, "token_budget", 4000)
    image_cost = getattr(rag_cfg, "image_cost", 16)

    class Handler(BaseHTTPRequestHandler):
        def _send(self, code: int, body: dict) -> None:
            data = json.dumps(body, sort_keys=True).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self):  # noqa: N802
            if self.path.rstrip("/") != "/query":
                self._send(404, {"error": "not found"})
                return
            try:
                n = int(self.headers.get("Content-Length", "0"))
                req = json.loads(self.rfile.read(n) or b"{}")
                q = req["q"]
                if not isinstance(q, str) or not q.strip():
                    raise ValueError("q must be a non-empty string")
            except (ValueError, KeyError, TypeError) as exc:
                self._send(400, {"error": f"bad request: {exc}"})
                return
            try:
                res = answer(q, graph, index, provider, k, budget, image_cost, parse=req.get("mode", "parsed") != "raw")
            except KeySGError as exc:
                self._send(500, {"error": str(exc), "stage": exc.stage})
                return
            self._send(200, res)

        def log_message(self, fmt, *args):
            log.info("%s - %s", self.address_string(), fmt % args)

    return Handler


def serve(graph, index, provider, host: str = "127.0.0.1", port: int = 8765, rag_cfg=None) -> ThreadingHTTPServer:
    """Create (but do not start) the server; call ``serve_forever`` on the result."""
    return ThreadingHTTPServer((host, port), make_handler(graph, index, provider, rag_cfg))
