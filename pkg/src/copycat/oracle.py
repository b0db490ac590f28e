"""Label-only oracle: pricing, quotas, in-process and TCP endpoints.

Only class indices ever leave this module.  Images cross the boundary as u8
pixels (``round(255 * v)``), so the in-process handle quantizes exactly as the
wire does and both routes agree label for label.

Wire protocol, one UTF-8 JSON object per line::

    -> {"id": 7, "h": 16, "w": 16, "c": 1, "pixels": "<base64 u8, C-H-W row-major>"}
    <- {"id": 7, "label": 2}
    <- {"id": 7, "error": {"code": "quota_exhausted", "msg": "..."}}
"""
from __future__ import annotations

import base64
import binascii
import csv
import enum
import json
import logging
import signal
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import nn

log = logging.getLogger(__name__)

DEFAULT_PRICE = Decimal("0.0001")  # $342.07 / 3,420,662 queries
DEFAULT_FREE_QUOTA = 30_000
STANDARD_MULTIPLIER = Decimal("1.5")
CENT = Decimal("0.01")


class Tier(str, enum.Enum):
    FREE = "FREE"
    BASIC = "BASIC"
    STANDARD = "STANDARD"


class OracleError(RuntimeError):
    code = "oracle_error"


class QuotaExhausted(OracleError):
    code = "quota_exhausted"


class ProtocolError(OracleError):
    code = "bad_request"


class OracleShapeError(OracleError, nn.ShapeError):
    code = "shape_mismatch"


class OracleConnectionError(OracleError, ConnectionError):
    code = "connection"


def _decimal(value) -> Decimal:
    return value if isinstance(value, Decimal) else Decimal(str(value))


def unit_price(tier: Tier | str, price: Decimal | float = DEFAULT_PRICE) -> Decimal:
    tier = Tier(tier)
    price = _decimal(price)
    return price * STANDARD_MULTIPLIER if tier == Tier.STANDARD else price


def estimate_cost(n_queries: int, tier: Tier | str = Tier.BASIC, price=DEFAULT_PRICE,
                  free_quota: int = DEFAULT_FREE_QUOTA) -> Decimal:
    """Dollars for ``n_queries``, rounded half-up to the cent."""
    if n_queries < 0:
        raise ValueError("n_queries must be non-negative")
    tier = Tier(tier)
    billed = max(0, n_queries - free_quota) if tier == Tier.FREE else n_queries
    return (billed * unit_price(tier, price)).quantize(CENT, rounding=ROUND_HALF_UP)


@dataclass
class TierConfig:
    tier: Tier = Tier.BASIC
    price_per_query: Decimal = DEFAULT_PRICE
    free_quota: int = DEFAULT_FREE_QUOTA

    def __post_init__(self):
        self.tier = Tier(self.tier)
        self.price_per_query = _decimal(self.price_per_query)
        if self.price_per_query < 0 or self.free_quota < 0:
            raise ValueError("price and free quota must be non-negative")


class Meter:
    """Thread-safe query counter and cost accumulator.

    A FREE-tier meter refuses queries beyond the quota rather than billing
    them, so free usage always costs $0.
    """

    def __init__(self, config: TierConfig | None = None):
        self.config = config or TierConfig()
        self._lock = threading.Lock()
        self.queries = 0
        self.billed = 0

    def reserve(self, n: int = 1) -> int:
        """Admit up to ``n`` queries; returns how many fit in the quota."""
        with self._lock:
            allowed = n
            if self.config.tier == Tier.FREE:
                allowed = max(0, min(n, self.config.free_quota - self.queries))
            self.queries += allowed
            if self.config.tier != Tier.FREE:
                self.billed += allowed
            return allowed

    @property
    def dollars(self) -> Decimal:
        return self.billed * unit_price(self.config.tier, self.config.price_per_query)


@dataclass(frozen=True)
class QueryRecord:
    index: int
    stolen_label: int
    latency_ms: float


def encode_pixels(image: np.ndarray) -> bytes:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()


def decode_pixels(raw: bytes, shape) -> np.ndarray:
    return np.frombuffer(raw, dtype=np.uint8).reshape(shape).astype(np.float64) / 255.0


class OracleHandle:
    """Common accounting for in-process and remote oracles."""

    def __init__(self, tier_config: TierConfig | None = None, keep_records: bool = False):
        self.meter = Meter(tier_config)
        self.keep_records = keep_records
        self.records: list[QueryRecord] = []

    @property
    def tier(self) -> Tier:
        return self.meter.config.tier

    @property
    def price_per_query(self) -> Decimal:
        return unit_price(self.tier, self.meter.config.price_per_query)

    @property
    def free_quota(self) -> int:
        return self.meter.config.free_quota

    @property
    def queries_sent(self) -> int:
        return self.meter.queries

    @property
    def dollars_spent(self) -> Decimal:
        return self.meter.dollars

    def cost(self) -> Decimal:
        return estimate_cost(self.queries_sent, self.tier, self.meter.config.price_per_query, self.free_quota)

    def query(self, image: np.ndarray) -> int:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3:
            raise OracleShapeError(f"query expects one (C, H, W) image, got {image.shape}")
        return int(self.query_batch(image[None])[0])

    def query_batch(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _record(self, start_index: int, labels, latency_ms: float) -> None:
        if self.keep_records:
            per = latency_ms / max(len(labels), 1)
            self.records.extend(QueryRecord(start_index + i, int(l), per) for i, l in enumerate(labels))

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalOracle(OracleHandle):
    """In-process endpoint around a trained model."""

    def __init__(self, model: nn.Model, tier_config: TierConfig | None = None, keep_records: bool = False):
        super().__init__(tier_config, keep_records)
        self._model = model

    @property
    def input_shape(self):
        return self._model.input_shape

    def query_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != self._model.input_shape:
            raise OracleShapeError(f"expected images (N, {', '.join(map(str, self._model.input_shape))}), "
                                   f"got {images.shape}")
        n = len(images)
        if n == 0:
            return np.empty(0, dtype=np.int64)
        start = self.meter.queries
        allowed = self.meter.reserve(n)
        t0 = time.perf_counter()
        labels = nn.predict(self._model, np.round(np.clip(images[:allowed], 0, 1) * 255.0) / 255.0)
        self._record(start, labels, (time.perf_counter() - t0) * 1e3)
        if allowed < n:
            raise QuotaExhausted(f"free quota of {self.free_quota} queries exhausted "
                                 f"after {allowed} of {n} batch queries")
        return labels


# ---------------------------------------------------------------------------
# remote client


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


class RemoteOracle(OracleHandle):
    """Client for :class:`OracleServer`.  Pipelines requests, matches by id."""

    def __init__(self, address: str, tier_config: TierConfig | None = None,
                 timeout: float = 30.0, window: int = 64, keep_records: bool = False):
        super().__init__(tier_config, keep_records)
        self.address = address
        self.window = window
        self._next_id = 0
        try:
            self._sock = socket.create_connection(parse_address(address), timeout=timeout)
        except OSError as exc:
            raise OracleConnectionError(f"cannot reach oracle at {address}: {exc}") from exc
        self._file = self._sock.makefile("rwb")

    def close(self) -> None:
        try:
            self._file.close()
            self._sock.close()
        except OSError:
            pass

    def _send(self, request_id: int, image: np.ndarray) -> None:
        c, h, w = image.shape
        msg = {"id": request_id, "h": h, "w": w, "c": c,
               "pixels": base64.b64encode(encode_pixels(image)).decode("ascii")}
        self._file.write(json.dumps(msg).encode("utf-8") + b"\n")

    def _receive(self) -> dict:
        line = self._file.readline()
        if not line:
            raise OracleConnectionError(f"oracle at {self.address} closed the connection")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable response {line[:80]!r}") from exc

    def query_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4:
            raise OracleShapeError(f"expected (N, C, H, W) images, got {images.shape}")
        n = len(images)
        labels = np.full(n, -1, dtype=np.int64)
        if n == 0:
            return labels
        ids = {}
        first_error: OracleError | None = None
        start_count = self.meter.queries
        t0 = time.perf_counter()
        sent = received = 0
        try:
            while received < n:
                while sent < n and sent - received < self.window:
                    rid = self._next_id
                    self._next_id += 1
                    ids[rid] = sent
                    self._send(rid, images[sent])
                    sent += 1
                self._file.flush()
                resp = self._receive()
                pos = ids.pop(resp.get("id"), None)
                if pos is None:
                    raise ProtocolError(f"response for unknown request id {resp.get('id')!r}")
                received += 1
                if "label" in resp:
                    labels[pos] = int(resp["label"])
                    self.meter.reserve(1)
                elif first_error is None:
                    first_error = _error_from_response(resp)
        except OSError as exc:
            raise OracleConnectionError(f"oracle at {self.address}: {exc}") from exc
        self._record(start_count, labels[labels >= 0], (time.perf_counter() - t0) * 1e3)
        if first_error is not None:
            raise first_error
        return labels


def _error_from_response(resp: dict) -> OracleError:
    err = resp.get("error") or {}
    cls = {"quota_exhausted": QuotaExhausted, "shape_mismatch": OracleShapeError,
           "bad_request": ProtocolError}.get(err.get("code"), OracleError)
    return cls(err.get("msg", "unknown oracle error"))


# ---------------------------------------------------------------------------
# server


class AuditLog:
    HEADER = "ts_ms,client,request_id,label"

    def __init__(self, path):
        self.path = Path(path)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._fh.write(self.HEADER + "\n")
            self._fh.flush()

    def write(self, client: str, request_id: int, label: int) -> None:
        self._writer.writerow([int(time.time() * 1000), client, request_id, label])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        client = "%s:%s" % self.client_address[:2]
        server: OracleServer = self.server.oracle  # type: ignore[attr-defined]
        for line in self.rfile:
            if not line.strip():
                continue
            reply = server.answer(line, client)
            try:
                self.wfile.write(json.dumps(reply).encode("utf-8") + b"\n")
                self.wfile.flush()
            except OSError:
                return


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


@dataclass
class OracleServer:
    """Threaded TCP front end for a model.

    Accounting and the audit log go through one lock so totals stay exact
    when many clients query at once.
    """
    model: nn.Model
    bind: str = "127.0.0.1:0"
    tier_config: TierConfig = field(default_factory=TierConfig)
    audit_log: str | Path | None = None

    def __post_init__(self):
        self.meter = Meter(self.tier_config)
        self._audit = AuditLog(self.audit_log) if self.audit_log else None
        self._account = threading.Lock()
        try:
            self._server = _TCPServer(parse_address(self.bind), _Handler)
        except OSError as exc:
            raise OracleConnectionError(f"cannot bind {self.bind}: {exc}") from exc
        self._server.oracle = self
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def answer(self, line: bytes, client: str) -> dict:
        try:
            req = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            return {"id": None, "error": {"code": "bad_request", "msg": f"invalid JSON: {exc}"}}
        rid = req.get("id") if isinstance(req, dict) else None
        try:
            image = self._decode(req)
        except OracleError as exc:
            return {"id": rid, "error": {"code": exc.code, "msg": str(exc)}}
        with self._account:
            if self.meter.reserve(1) == 0:
                return {"id": rid, "error": {"code": "quota_exhausted",
                                             "msg": f"free quota of {self.meter.config.free_quota} exhausted"}}
        label = int(nn.predict(self.model, image[None])[0])
        with self._account:
            if self._audit:
                self._audit.write(client, rid, label)
        return {"id": rid, "label": label}

    def _decode(self, req) -> np.ndarray:
        if not isinstance(req, dict):
            raise ProtocolError("request must be a JSON object")
        rid = req.get("id")
        if not isinstance(rid, int) or isinstance(rid, bool) or not 0 <= rid < 2**64:
            raise ProtocolError("id must be an unsigned 64-bit integer")
        try:
            c, h, w = (int(req[k]) for k in ("c", "h", "w"))
            raw = base64.b64decode(req["pixels"], validate=True)
        except (KeyError, TypeError, ValueError, binascii.Error) as exc:
            raise ProtocolError(f"malformed request: {exc}") from exc
        if len(raw) != c * h * w:
            raise ProtocolError(f"pixels carry {len(raw)} bytes, header says {c}x{h}x{w}")
        if (c, h, w) != self.model.input_shape:
            raise OracleShapeError(f"model expects (c, h, w) = {self.model.input_shape}, got {(c, h, w)}")
        return decode_pixels(raw, (c, h, w))

    def start(self) -> "OracleServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        log.info("oracle listening on %s (%s tier)", self.address, self.meter.config.tier.value)
        return self

    def serve_forever(self) -> None:
        """Block until SIGINT/SIGTERM, then shut down cleanly."""
        stop = threading.Event()

        def _on_signal(signum, frame):
            stop.set()

        previous = {s: signal.signal(s, _on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
        self.start()
        try:
            while not stop.wait(0.2):
                pass
        finally:
            for s, h in previous.items():
                signal.signal(s, h)
            self.stop()

    def stop(self) -> None:
        if self._thread is not None:
            self._server.shutdown()
            self._thread.join()
            self._thread = None
        self._server.server_close()
        if self._audit:
            self._audit.close()
            self._audit = None
        log.info("oracle stopped after %d queries", self.meter.queries)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(model: nn.Model, bind_address: str, tier_config: TierConfig | None = None,
          audit_log=None, block: bool = True) -> OracleServer:
    server = OracleServer(model, bind_address, tier_config or TierConfig(), audit_log)
    if block:
        server.serve_forever()
        return server
    return server.start()
