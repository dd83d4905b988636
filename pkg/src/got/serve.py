"""Long-running HTTP inference service over loaded checkpoints.

Endpoints (HTTP/1.1, JSON bodies):

* ``GET /v1/health``  readiness, loaded tasks, request counters
* ``GET /v1/model``   vocabulary size, checkpoint digests, config snapshot
* ``POST /v1/caption``  body = raw PNG/JPEG -> detections with captions
* ``POST /v1/retrieve`` multipart with an image file and a ``query`` field
  (or raw image body with ``?query=``) -> candidates, chosen first

Errors are ``{"error": str, "code": int}``. Handlers run concurrently over
immutable model state; checkpoint swaps are exclusive (readiness flips false
while one is in flight). Responses for a fixed checkpoint and request are
byte-identical; inference timing travels in the ``X-Latency-Ms`` response
header so bodies stay deterministic.
"""

from __future__ import annotations

import email.parser
import email.policy
import io
import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import TrainConfig
from .datasets import tokenize
from .errors import GotError, ValidationError
from .infer_eval import detect_and_caption, retrieve
from .trainer import Checkpoint, ModelParams, load_checkpoint

MAX_BODY_BYTES = 64 * 1024 * 1024


@dataclass
class LoadedModel:
    params: ModelParams
    config: TrainConfig
    digest: str
    iteration: int


class InferenceService:
    """Holds the loaded models and serves the endpoint logic; the HTTP layer
    below is a thin shell around this object (tests can call it directly)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._loading = False
        self.caption_model: LoadedModel | None = None
        self.retrieval_model: LoadedModel | None = None
        self.counters = {"caption": 0, "retrieve": 0, "health": 0, "model": 0}

    # -- loading ---------------------------------------------------------
    def load(self, path, task: str) -> LoadedModel:
        """Exclusive checkpoint swap; requests are refused while in flight."""
        with self._lock:
            self._loading = True
        try:
            ckpt = load_checkpoint(path, expected_task=task)
            model = LoadedModel(
                params=ckpt.to_model(),
                config=TrainConfig.from_dict(ckpt.manifest["config"]),
                digest=ckpt.digest,
                iteration=int(ckpt.manifest["iteration"]),
            )
            with self._lock:
                if task == "caption":
                    self.caption_model = model
                else:
                    self.retrieval_model = model
            return model
        finally:
            with self._lock:
                self._loading = False

    def install(self, ckpt: Checkpoint) -> LoadedModel:
        """Adopt an in-memory checkpoint (used by tests and the CLI)."""
        task = ckpt.manifest["task"]
        model = LoadedModel(ckpt.to_model(), TrainConfig.from_dict(ckpt.manifest["config"]),
                            ckpt.digest, int(ckpt.manifest["iteration"]))
        with self._lock:
            if task == "caption":
                self.caption_model = model
            else:
                self.retrieval_model = model
        return model

    # -- state -------------------------------------------------------------
    @property
    def ready(self) -> bool:
        with self._lock:
            return not self._loading and (self.caption_model is not None or self.retrieval_model is not None)

    def _bump(self, key: str) -> None:
        with self._lock:
            self.counters[key] += 1

    # -- endpoints -----------------------------------------------------------
    def handle_health(self) -> tuple[int, dict]:
        self._bump("health")
        with self._lock:
            body = {
                "ready": not self._loading and (self.caption_model is not None or self.retrieval_model is not None),
                "tasks": sorted(
                    t for t, m in (("caption", self.caption_model), ("retrieval", self.retrieval_model))
                    if m is not None
                ),
                "counters": dict(self.counters),
            }
        return 200, body

    def handle_model_info(self) -> tuple[int, dict]:
        self._bump("model")
        with self._lock:
            body = {"ready": not self._loading, "models": {}}
            for task, model in (("caption", self.caption_model), ("retrieval", self.retrieval_model)):
                if model is not None:
                    body["models"][task] = {
                        "digest": model.digest,
                        "iteration": model.iteration,
                        "vocabulary_size": len(model.params.vocab),
                        "mode": model.params.mode,
                        "width_preset": model.params.widths.preset,
                        "superclasses": list(model.params.superclass_names),
                    }
        return 200, body

    def handle_caption(self, image_bytes: bytes) -> tuple[int, dict]:
        self._bump("caption")
        if self._loading:
            return 503, {"error": "checkpoint swap in progress", "code": 503}
        model = self.caption_model
        if model is None:
            return 409, {"error": "no caption model loaded", "code": 409}
        try:
            pixels = _decode_image(image_bytes)
        except ValidationError as e:
            return 400, {"error": str(e), "code": 400}
        result = detect_and_caption(pixels, model.params, model.config)
        detections = [
            {
                "box": [round(float(v), 4) for v in obj.box],
                "superclass": obj.superclass,
                "score": round(obj.score, 6),
                "caption": obj.caption,
            }
            for obj in result.objects
        ]
        return 200, {
            "detections": detections,
            "fallback_used": result.fallback_used,
            "model": {"task": "caption", "digest": model.digest, "iteration": model.iteration},
        }

    def handle_retrieve(self, image_bytes: bytes, query: str | None) -> tuple[int, dict]:
        self._bump("retrieve")
        if self._loading:
            return 503, {"error": "checkpoint swap in progress", "code": 503}
        model = self.retrieval_model
        if model is None:
            return 409, {"error": "no retrieval model loaded", "code": 409}
        if query is None or not query.strip():
            return 400, {"error": "missing query", "code": 400}
        try:
            pixels = _decode_image(image_bytes)
        except ValidationError as e:
            return 400, {"error": str(e), "code": 400}
        result = retrieve(pixels, tokenize(query), model.params, model.config)
        ordered = [result.chosen] + sorted(
            (c for c in result.candidates if c is not result.chosen),
            key=lambda c: -c.retrieval_score,
        )
        detections = [
            {
                "box": [round(float(v), 4) for v in c.box],
                "superclass": c.superclass,
                "retrieval_score": round(c.retrieval_score, 6),
            }
            for c in ordered
        ]
        return 200, {
            "detections": detections,
            "query": query,
            "all_unknown": result.all_unknown,
            "model": {"task": "retrieval", "digest": model.digest, "iteration": model.iteration},
        }


def _decode_image(data: bytes) -> np.ndarray:
    if not data:
        raise ValidationError("empty request body")
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError) as e:
        raise ValidationError(f"request body is not a decodable image: {e}") from e
    return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def _parse_multipart(content_type: str, body: bytes) -> tuple[bytes | None, str | None]:
    """Extract (image bytes, query) from a multipart/form-data body."""
    header = f"Content-Type: {content_type}\r\nMIME-Version: 1.0\r\n\r\n".encode()
    msg = email.parser.BytesParser(policy=email.policy.default).parsebytes(header + body)
    if not msg.is_multipart():
        return None, None
    image = None
    query = None
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        payload = part.get_payload(decode=True)
        if name == "query" and payload is not None:
            query = payload.decode("utf-8", errors="replace")
        elif payload:
            image = payload
    return image, query


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "got-serve/0.1"
    service: InferenceService  # attached by make_server

    def log_message(self, fmt, *args):  # quiet by default
        if getattr(self.server, "verbose", False):
            super().log_message(fmt, *args)

    # -- plumbing -------------------------------------------------------------
    def _send_json(self, status: int, payload: dict, latency_ms: float | None = None) -> None:
        body = json.dumps(payload, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        if latency_ms is not None:
            self.send_header("X-Latency-Ms", f"{latency_ms:.1f}")
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> bytes | None:
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY_BYTES:
            self._send_json(400, {"error": "request body too large", "code": 400})
            return None
        return self.rfile.read(length) if length else b""

    # -- verbs ------------------------------------------------------------------
    def do_OPTIONS(self):  # CORS preflight for the browser console
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        path = urlparse(self.path).path
        if path == "/v1/health":
            self._send_json(*self.service.handle_health())
        elif path == "/v1/model":
            self._send_json(*self.service.handle_model_info())
        else:
            self._send_json(404, {"error": f"unknown path {path}", "code": 404})

    def do_POST(self):
        parsed = urlparse(self.path)
        body = self._read_body()
        if body is None:
            return
        started = time.perf_counter()
        try:
            if parsed.path == "/v1/caption":
                status, payload = self.service.handle_caption(body)
            elif parsed.path == "/v1/retrieve":
                content_type = self.headers.get("Content-Type", "")
                if content_type.startswith("multipart/"):
                    image, query = _parse_multipart(content_type, body)
                else:
                    image = body
                    qs = parse_qs(parsed.query)
                    query = qs["query"][0] if "query" in qs else None
                status, payload = self.service.handle_retrieve(image or b"", query)
            else:
                status, payload = 404, {"error": f"unknown path {parsed.path}", "code": 404}
        except GotError as e:
            status, payload = 400, {"error": str(e), "code": 400}
        except Exception:
            error_id = f"e{int(time.time() * 1000) % 10**9:09d}"
            status, payload = 500, {"error": f"internal failure (id {error_id})", "code": 500}
        self._send_json(status, payload, latency_ms=(time.perf_counter() - started) * 1000)


def make_server(service: InferenceService, host: str = "127.0.0.1", port: int = 0,
                verbose: bool = False) -> ThreadingHTTPServer:
    """A threading HTTP server bound to (host, port); port 0 picks a free one."""
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    server.verbose = verbose
    return server


def run_server(service: InferenceService, host: str, port: int, verbose: bool = True) -> None:
    server = make_server(service, host, port, verbose=verbose)
    host_shown, port_shown = server.server_address[:2]
    print(f"serving on http://{host_shown}:{port_shown} "
          f"(caption={'yes' if service.caption_model else 'no'}, "
          f"retrieval={'yes' if service.retrieval_model else 'no'})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
