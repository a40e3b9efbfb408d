"""Black-box boundary: serve a classifier over HTTP and audit it remotely.

The wire format carries raw little-endian float32 image payloads in
base64, so a round trip is bit-exact and needs no image codec.  All
preprocessing (normalization) happens server-side with the model's stored
statistics, matching a real prediction API where the client cannot
control preprocessing.

    POST /v1/classify   {"images": [{"dims": [c,h,w], "data": "<b64 f32le>"}]}
        -> {"outputs": [{"probs": [...]}]}            (probability mode)
        -> {"outputs": [{"topk": [{"label": l, "rank": r}, ...]}]}
    GET  /v1/health     -> {"status": "ok", "num_classes": N, "mode": ...}

Status codes: 200 ok, 400 malformed request, 422 dims mismatch, 500
internal failure.  In test mode the ``x-audit-seed`` request header
reseeds stochastic output wrappers for reproducible audits.
"""

from __future__ import annotations

import base64
import json
import threading
import time
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import numpy as np

from .model import QueryOutput, as_endpoint


class EndpointError(RuntimeError):
    """A remote query failed permanently."""


def encode_images(images: np.ndarray) -> list[dict]:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    return [
        {
            "dims": list(img.shape),
            "data": base64.b64encode(np.ascontiguousarray(img, dtype="<f4").tobytes()).decode(
                "ascii"
            ),
        }
        for img in images
    ]


def decode_images(entries: list[dict], expected_dims: Optional[tuple[int, ...]] = None) -> np.ndarray:
    out = []
    for i, entry in enumerate(entries):
        dims = tuple(int(v) for v in entry["dims"])
        if len(dims) != 3:
            raise ValueError(f"image {i}: dims must have 3 entries")
        if expected_dims is not None and dims != tuple(expected_dims):
            raise ValueError(f"image {i}: dims {dims} do not match model input {expected_dims}")
        raw = base64.b64decode(entry["data"])
        count = int(np.prod(dims))
        if len(raw) != count * 4:
            raise ValueError(f"image {i}: payload has {len(raw)} bytes, dims need {count * 4}")
        out.append(np.frombuffer(raw, dtype="<f4").reshape(dims))
    return np.stack(out)


def _output_payload(out: QueryOutput) -> list[dict]:
    if out.probs is not None:
        return [{"probs": [float(v) for v in row]} for row in out.probs]
    return [
        {"topk": [{"label": int(lab), "rank": int(rank)} for lab, rank in row]}
        for row in out.topk
    ]


class ModelServer:
    """Threaded HTTP server wrapping a query endpoint.

    Stateless per request; safe for concurrent clients because forward
    passes only read the weights.
    """

    def __init__(self, endpoint, host: str = "127.0.0.1", port: int = 0,
                 test_mode: bool = False):
        self.endpoint = as_endpoint(endpoint)
        self.test_mode = test_mode
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args) -> None:  # keep test output quiet
                pass

            def _send(self, code: int, doc: dict) -> None:
                body = json.dumps(doc).encode("utf-8")
                self.send_response(code)
                self.send_header("content-type", "application/json")
                self.send_header("content-length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self) -> None:
                if self.path != "/v1/health":
                    self._send(404, {"error": f"unknown path {self.path}"})
                    return
                doc = {
                    "status": "ok",
                    "num_classes": server.endpoint.num_classes,
                    "mode": server.endpoint.mode,
                }
                k = getattr(server.endpoint, "k", None)
                if k is not None:
                    doc["k"] = k
                dims = getattr(server.endpoint, "input_dims", None)
                if dims is not None:
                    doc["input_dims"] = list(dims)
                self._send(200, doc)

            def do_POST(self) -> None:
                if self.path != "/v1/classify":
                    self._send(404, {"error": f"unknown path {self.path}"})
                    return
                try:
                    length = int(self.headers.get("content-length", "0"))
                    doc = json.loads(self.rfile.read(length).decode("utf-8"))
                    entries = doc["images"]
                    if not isinstance(entries, list) or not entries:
                        raise KeyError("images")
                except (ValueError, KeyError, TypeError) as exc:
                    self._send(400, {"error": f"malformed request: {exc}"})
                    return
                try:
                    images = decode_images(
                        entries, getattr(server.endpoint, "input_dims", None)
                    )
                    if np.any(~np.isfinite(images)):
                        raise ValueError("non-finite pixel values")
                except (ValueError, KeyError, TypeError) as exc:
                    self._send(422, {"error": str(exc)})
                    return
                endpoint = server.endpoint
                seed_header = self.headers.get("x-audit-seed")
                if server.test_mode and seed_header and hasattr(endpoint, "with_seed"):
                    endpoint = endpoint.with_seed(int(seed_header))
                try:
                    # evaluate image by image: responses must not depend on
                    # how the client batched its requests
                    payload: list[dict] = []
                    for i in range(images.shape[0]):
                        payload.extend(_output_payload(endpoint.query(images[i : i + 1])))
                except Exception as exc:  # surface as a server error, not a hang
                    self._send(500, {"error": f"classification failed: {exc}"})
                    return
                self._send(200, {"outputs": payload})

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ModelServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def serve_model(endpoint, host: str = "127.0.0.1", port: int = 0,
                test_mode: bool = False) -> ModelServer:
    """Wrap a model or endpoint in an HTTP server (not yet started)."""
    return ModelServer(endpoint, host=host, port=port, test_mode=test_mode)


class RemoteEndpoint:
    """Client-side endpoint speaking the wire protocol.

    Splits query batches, retries transient failures with capped
    exponential backoff, and reassembles responses in request order.
    """

    def __init__(self, url: str, batch_size: int = 50, timeout: float = 30.0,
                 max_retries: int = 3, backoff: float = 0.2,
                 backoff_cap: float = 2.0, audit_seed: Optional[int] = None):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.url = url.rstrip("/")
        self.batch_size = batch_size
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.backoff_cap = backoff_cap
        self.audit_seed = audit_seed
        health = self._request("GET", "/v1/health", None)
        self.num_classes = int(health["num_classes"])
        self.mode = health["mode"]
        self.k = health.get("k")
        dims = health.get("input_dims")
        self.input_dims = tuple(dims) if dims else None

    def _request(self, method: str, path: str, payload: Optional[dict]) -> dict:
        body = json.dumps(payload).encode("utf-8") if payload is not None else None
        delay = self.backoff
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            req = urllib.request.Request(self.url + path, data=body, method=method)
            req.add_header("content-type", "application/json")
            if self.audit_seed is not None:
                req.add_header("x-audit-seed", str(self.audit_seed))
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                if exc.code >= 500 and attempt < self.max_retries:
                    last = exc
                else:
                    detail = ""
                    try:
                        detail = json.loads(exc.read().decode("utf-8")).get("error", "")
                    except Exception:
                        pass
                    raise EndpointError(
                        f"{method} {path} failed with HTTP {exc.code}: {detail}"
                    ) from exc
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                if attempt >= self.max_retries:
                    raise EndpointError(f"{method} {path} unreachable: {exc}") from exc
                last = exc
            time.sleep(delay)
            delay = min(delay * 2, self.backoff_cap)
        raise EndpointError(f"{method} {path} failed after retries: {last}")

    def query(self, images: np.ndarray) -> QueryOutput:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        probs_rows: list[list[float]] = []
        topk_rows: list[list[tuple[int, int]]] = []
        for start in range(0, images.shape[0], self.batch_size):
            chunk = images[start : start + self.batch_size]
            doc = self._request("POST", "/v1/classify", {"images": encode_images(chunk)})
            outputs = doc.get("outputs", [])
            if len(outputs) != chunk.shape[0]:
                raise EndpointError(
                    f"server returned {len(outputs)} outputs for {chunk.shape[0]} images"
                )
            for entry in outputs:
                if "probs" in entry:
                    probs_rows.append(entry["probs"])
                else:
                    topk_rows.append(
                        [(int(p["label"]), int(p["rank"])) for p in entry["topk"]]
                    )
        if probs_rows and topk_rows:
            raise EndpointError("server mixed probs and topk outputs in one response")
        if probs_rows:
            return QueryOutput(probs=np.asarray(probs_rows, dtype=np.float64))
        return QueryOutput(topk=topk_rows)


def remote_endpoint(url: str, **kwargs) -> RemoteEndpoint:
    """Connect to a conforming classification service."""
    return RemoteEndpoint(url, **kwargs)
