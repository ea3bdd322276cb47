"""JSON-over-HTTP routing gateway.

``RoutingService`` holds one immutable router and turns request dicts into
response dicts; ``make_server`` wraps it in a threaded stdlib HTTP server.
The service only decides where a query should go and never calls a model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

import numpy as np

from .checkpoint import checkpoint_version, load_checkpoint
from .dataset import IntegrityError, SchemaError
from .numerics import ShapeError
from .routers import BottleneckRouter, param_count, route, route_with_intervention

log = logging.getLogger(__name__)

MAX_BODY_BYTES = 1 << 22


class UpstreamError(RuntimeError):
    """The embedding service failed or timed out after all retries."""


class RequestError(ValueError):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


# --------------------------------------------------------------------------
# embedding clients


@dataclass(frozen=True)
class EmbeddingClientConfig:
    endpoint: str
    timeout_ms: int = 5000
    dim: int | None = None
    retries: int = 2


class HttpEmbeddingClient:
    """POSTs ``{"text": ...}`` and expects ``{"embedding": [...]}`` back."""

    def __init__(self, config: EmbeddingClientConfig):
        self.config = config

    def embed(self, text: str) -> np.ndarray:
        body = json.dumps({"text": text}).encode()
        last: Exception | None = None
        for attempt in range(self.config.retries + 1):
            req = urllib.request.Request(
                self.config.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
            )
            try:
                with urllib.request.urlopen(req, timeout=self.config.timeout_ms / 1000) as resp:
                    payload = json.loads(resp.read())
                break
            except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
                last = exc
                log.warning("embedding request attempt %d failed: %s", attempt + 1, exc)
        else:
            raise UpstreamError(f"embedding service unavailable after {self.config.retries + 1} attempts: {last}")
        try:
            vec = np.asarray(payload["embedding"], dtype=np.float64)
        except (KeyError, TypeError, ValueError):
            raise UpstreamError("embedding service returned no usable 'embedding' field") from None
        return _check_dim(vec, self.config.dim)


class MockEmbeddingClient:
    """Deterministic stand-in: the text's SHA-256 seeds a Gaussian vector."""

    def __init__(self, dim: int, seed: int = 0):
        self.config = EmbeddingClientConfig(endpoint="mock://", dim=dim, retries=0)
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        return rng.normal(0.0, 1.0 / np.sqrt(self.config.dim), size=self.config.dim)


def _check_dim(vec: np.ndarray, dim: int | None) -> np.ndarray:
    if vec.ndim != 1 or (dim is not None and vec.shape[0] != dim):
        raise IntegrityError(f"embedding has shape {vec.shape}, expected ({dim},)")
    if not np.isfinite(vec).all():
        raise IntegrityError("embedding contains non-finite values")
    return vec


def embed_via_client(client, text: str) -> np.ndarray:
    return _check_dim(np.asarray(client.embed(text), dtype=np.float64), client.config.dim)


# --------------------------------------------------------------------------
# request handling


class RoutingService:
    def __init__(self, router, client=None, version: str | None = None):
        dim = getattr(router, "input_dim", None)  # None for the random policy
        if client is not None and None not in (dim, client.config.dim) and client.config.dim != dim:
            raise IntegrityError(f"embedding client dimension {client.config.dim} does not match checkpoint input {dim}")
        if client is not None and client.config.dim is None:
            client.config = replace(client.config, dim=dim)
        self.input_dim = dim
        self.router = router
        self.client = client
        self.version = version or getattr(router, "version", None) or checkpoint_version(router)
        self._lock = threading.Lock()
        self._counters = {"requests": 0, "errors": 0}

    def _count(self, key: str) -> None:
        with self._lock:
            self._counters[key] += 1

    @property
    def counters(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counters)

    def health(self) -> dict[str, Any]:
        return {"status": "ok", "checkpoint_version": self.version, **self.counters}

    def info(self) -> dict[str, Any]:
        r = self.router
        return {
            "checkpoint_version": self.version,
            "policy": r.kind,
            "schema": r.schema.to_dict() if isinstance(r, BottleneckRouter) else None,
            "catalog": r.catalog.to_dict(),
            "lambda": r.metadata.get("lambda"),
            "param_count": param_count(r),
            "input_dim": self.input_dim,
        }

    def _embedding(self, req: dict[str, Any]) -> np.ndarray:
        has_emb, has_text = "embedding" in req, "text" in req
        if has_emb == has_text:
            raise RequestError(400, "bad_request", "provide exactly one of 'embedding' or 'text'")
        if has_text:
            if self.client is None:
                raise RequestError(
                    400, "embedding_client_not_configured", "text input needs an embedding client (set EMBED_ENDPOINT)"
                )
            if not isinstance(req["text"], str):
                raise RequestError(400, "bad_request", "'text' must be a string")
            try:
                return embed_via_client(self.client, req["text"])
            except UpstreamError as exc:
                raise RequestError(502, "upstream_error", str(exc)) from None
            except IntegrityError as exc:
                raise RequestError(502, "upstream_integrity", str(exc)) from None
        try:
            emb = np.asarray(req["embedding"], dtype=np.float64)
        except (TypeError, ValueError):
            raise RequestError(400, "bad_request", "'embedding' must be an array of numbers") from None
        if emb.ndim != 1 or (self.input_dim is not None and emb.shape[0] != self.input_dim):
            raise RequestError(400, "dimension_mismatch", f"embedding has shape {emb.shape}, expected ({self.input_dim},)")
        if not np.isfinite(emb).all():
            raise RequestError(400, "bad_request", "embedding contains non-finite values")
        return emb

    def route(self, req: Any) -> dict[str, Any]:
        """Answer one routing request; raises ``RequestError`` on bad input."""
        if not isinstance(req, dict):
            raise RequestError(400, "bad_request", "request body must be a JSON object")
        start = time.perf_counter()
        emb = self._embedding(req)
        iv = req.get("intervention")
        try:
            if iv is None:
                decision = route(self.router, emb)
            else:
                if not isinstance(self.router, BottleneckRouter):
                    raise RequestError(400, "intervention_unsupported", f"{self.router.kind} routers have no concepts")
                if not isinstance(iv, dict) or "group" not in iv or "override" not in iv:
                    raise RequestError(400, "bad_request", "intervention needs 'group' and 'override'")
                decision = route_with_intervention(self.router, emb, iv["group"], iv["override"])
        except (SchemaError, ShapeError, ValueError) as exc:
            if isinstance(exc, RequestError):
                raise
            raise RequestError(400, "bad_intervention", str(exc)) from None
        rid = req.get("request_id")
        if rid is None:
            rid = hashlib.sha256(json.dumps(req, sort_keys=True).encode()).hexdigest()[:16]
        names = self.router.catalog.names
        resp: dict[str, Any] = {
            "request_id": str(rid),
            "model": decision.model,
            "index": int(decision.index),
            "scores": {m: float(s) for m, s in zip(names, decision.scores)},
            "rationale": decision.rationale,
            "intervened": decision.intervened,
            "checkpoint_version": self.version,
        }
        if req.get("verbose") and decision.concepts is not None:
            resp["concepts"] = [float(v) for v in decision.concepts]
        resp["processing_ms"] = (time.perf_counter() - start) * 1000.0
        return resp

    def handle(self, method: str, path: str, body: bytes | None) -> tuple[int, dict[str, Any]]:
        """Dispatch one HTTP request to ``(status, json_body)``."""
        self._count("requests")
        try:
            if method == "GET" and path == "/health":
                return 200, self.health()
            if method == "GET" and path == "/info":
                return 200, self.info()
            if path == "/route":
                if method != "POST":
                    raise RequestError(405, "method_not_allowed", "use POST for /route")
                try:
                    req = json.loads(body or b"")
                except ValueError as exc:
                    raise RequestError(400, "bad_json", f"request body is not valid JSON: {exc}") from None
                return 200, self.route(req)
            raise RequestError(404, "not_found", f"no endpoint {method} {path}")
        except RequestError as exc:
            self._count("errors")
            return exc.status, {"code": exc.code, "message": str(exc)}
        except Exception as exc:  # noqa: BLE001 - last-resort guard, logged
            self._count("errors")
            log.exception("unhandled error")
            return 500, {"code": "internal_error", "message": type(exc).__name__}


def _handler_for(service: RoutingService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _respond(self, status: int, payload: dict[str, Any]) -> None:
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):  # noqa: N802
            self._respond(*service.handle("GET", self.path, None))

        def do_POST(self):  # noqa: N802
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY_BYTES:
                self._respond(413, {"code": "too_large", "message": "request body too large"})
                return
            self._respond(*service.handle("POST", self.path, self.rfile.read(length)))

        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

    return Handler


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 256  # socketserver's default backlog of 5 resets bursts of clients


def make_server(service: RoutingService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    return _Server((host, port), _handler_for(service))


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ServiceConfig:
    checkpoint_path: str | None = None
    bind_addr: str = "127.0.0.1:8080"
    embed_endpoint: str | None = None
    embed_timeout_ms: int = 5000
    embed_retries: int = 2
    mock_embeddings: bool = False

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.bind_addr.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bind address {self.bind_addr!r} is not host:port")
        return host, int(port)

    @classmethod
    def load(cls, path=None, env=None, **overrides) -> "ServiceConfig":
        """File values, then environment variables, then explicit overrides."""
        env = os.environ if env is None else env
        values: dict[str, Any] = {}
        if path is not None:
            values.update(json.loads(Path(path).read_text()))
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown service config keys: {sorted(unknown)}")
        for var, key, conv in (
            ("BIND_ADDR", "bind_addr", str),
            ("CHECKPOINT_PATH", "checkpoint_path", str),
            ("EMBED_ENDPOINT", "embed_endpoint", str),
            ("EMBED_TIMEOUT_MS", "embed_timeout_ms", int),
        ):
            if env.get(var):
                values[key] = conv(env[var])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def build_service(config: ServiceConfig) -> RoutingService:
    if not config.checkpoint_path:
        raise ValueError("no checkpoint configured (set CHECKPOINT_PATH or pass --checkpoint)")
    router = load_checkpoint(config.checkpoint_path)
    client = None
    if config.mock_embeddings:
        client = MockEmbeddingClient(getattr(router, "input_dim", 16))
    elif config.embed_endpoint:
        client = HttpEmbeddingClient(
            EmbeddingClientConfig(
                config.embed_endpoint, config.embed_timeout_ms, getattr(router, "input_dim", None), config.embed_retries
            )
        )
    return RoutingService(router, client)


def serve(config: ServiceConfig) -> None:
    """Load the checkpoint, bind and serve until interrupted."""
    service = build_service(config)
    host, port = config.host_port
    server = make_server(service, host, port)
    log.info("serving %s (%s) on %s:%d", service.router.kind, service.version, host, server.server_port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


__all__ = [
    "EmbeddingClientConfig",
    "HttpEmbeddingClient",
    "MockEmbeddingClient",
    "RequestError",
    "RoutingService",
    "ServiceConfig",
    "UpstreamError",
    "build_service",
    "embed_via_client",
    "make_server",
    "serve",
]
