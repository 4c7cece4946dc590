"""Read-only HTTP search endpoint over a persisted atlas.

GET  /healthz -> {"status": "ok", "atlas_checksum": ...}
POST /search  -> hits, majority votes and label counts for one query vector
"""

from __future__ import annotations

import json
import logging
import math
import threading
from collections import Counter
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .atlas_index import Atlas, AtlasError, knn, load_atlas
from .evaluation import majority_vote

log = logging.getLogger(__name__)

__all__ = ["SearchServer", "handle_search", "make_server"]

DEFAULT_K = 7
DEFAULT_MAJORITY = (1, 3, 5, 7)
MAX_BODY = 64 * 1024 * 1024


class RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def handle_search(atlas: Atlas, body: dict) -> dict:
    """Pure request handler, shared by the HTTP layer and tests."""
    if not isinstance(body, dict):
        raise RequestError(400, "request body must be a JSON object")
    vector = body.get("vector")
    if not isinstance(vector, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in vector
    ):
        raise RequestError(400, "'vector' must be an array of numbers")
    if len(vector) != atlas.dim:
        raise RequestError(400, f"dim mismatch: got {len(vector)}, atlas {atlas.dim}")
    if not all(math.isfinite(v) for v in vector):
        raise RequestError(400, "'vector' contains non-finite values")
    k = body.get("k", DEFAULT_K)
    if not isinstance(k, int) or isinstance(k, bool):
        raise RequestError(400, "'k' must be an integer")
    if not 1 <= k <= atlas.count:
        raise RequestError(422, f"k out of range: {k} (atlas holds {atlas.count} vectors)")
    majority_n = body.get("majority_n")
    if majority_n is None:
        majority_n = [n for n in DEFAULT_MAJORITY if n <= k]
    if not isinstance(majority_n, list) or not all(isinstance(n, int) and not isinstance(n, bool) for n in majority_n):
        raise RequestError(400, "'majority_n' must be an array of integers")
    bad = [n for n in majority_n if not 1 <= n <= k]
    if bad:
        raise RequestError(422, f"majority_n out of range for k={k}: {bad}")

    try:
        hits = knn(atlas, vector, k)
    except AtlasError as exc:
        raise RequestError(400, str(exc)) from exc
    counts = Counter(h.label_id for h in hits)
    return {
        "hits": [h.to_json() for h in hits],
        "majority": [majority_vote(hits, n).to_json() for n in majority_n],
        "top_labels": [
            {"label_id": label, "count": c}
            for label, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        ],
    }


class SearchServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, atlas_path: str | Path, load_in_background: bool = True):
        super().__init__(address, _Handler)
        self.atlas_path = Path(atlas_path)
        self.atlas: Atlas | None = None
        self.load_error: str | None = None
        self.ready = threading.Event()
        if load_in_background:
            threading.Thread(target=self._load, daemon=True).start()
        else:
            self._load()

    def _load(self) -> None:
        try:
            self.atlas = load_atlas(self.atlas_path)
            log.info("atlas loaded: %d x %d, checksum %s", self.atlas.count, self.atlas.dim, self.atlas.checksum)
        except Exception as exc:  # surfaced through /healthz
            self.load_error = f"{type(exc).__name__}: {exc}"
            log.error("failed to load atlas: %s", self.load_error)
        finally:
            self.ready.set()


class _Handler(BaseHTTPRequestHandler):
    server: SearchServer
    protocol_version = "HTTP/1.1"
    # headers and body go out as separate writes; avoid the Nagle/delayed-ACK stall on keep-alive
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):
        log.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload, separators=(",", ":")).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _atlas_or_error(self) -> Atlas | None:
        if self.server.atlas is not None:
            return self.server.atlas
        if self.server.load_error:
            self._send(500, {"error": f"atlas failed to load: {self.server.load_error}"})
        else:
            self._send(503, {"error": "atlas loading"})
        return None

    def do_GET(self):
        if self.path != "/healthz":
            self._send(404, {"error": f"no such endpoint: {self.path}"})
            return
        atlas = self._atlas_or_error()
        if atlas is not None:
            self._send(200, {"status": "ok", "atlas_checksum": atlas.checksum})

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            self._send(413, {"error": "request body too large"})
            return
        raw = self.rfile.read(length)
        if self.path != "/search":
            self._send(404, {"error": f"no such endpoint: {self.path}"})
            return
        atlas = self._atlas_or_error()
        if atlas is None:
            return
        try:
            body = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            self._send(400, {"error": f"bad JSON: {exc}"})
            return
        try:
            self._send(200, handle_search(atlas, body))
        except RequestError as exc:
            self._send(exc.status, {"error": str(exc)})


def make_server(atlas_path: str | Path, host: str = "127.0.0.1", port: int = 8080,
                load_in_background: bool = True) -> SearchServer:
    return SearchServer((host, port), atlas_path, load_in_background)
