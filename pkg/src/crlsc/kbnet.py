"""Knowledge bases served over a small length-prefixed TCP protocol.

Every frame is ``len u32 | type u8 | payload`` (little-endian) where ``len``
counts the type byte plus the payload. Requests are answered one at a time
per connection and the server keeps no per-client state, so a client may
reconnect to a restarted server without ceremony.

======  =================  ==========================================
type    message            payload
======  =================  ==========================================
0x00    Hello              version u8 (echoed back on success)
0x01    QueryRequest       n u32, d u32, q f32[d]
0x02    QueryResponse      count u32, count x (id u64, dist f32, v f32[d])
0x03    InfoRequest        empty
0x04    InfoResponse       d u32, m u32, k* u32, N u64, tag (u16 len + utf-8)
0x7F    ErrorResponse      code u16, message (u16 len + utf-8)
======  =================  ==========================================
"""

from __future__ import annotations

import hashlib
import logging
import os
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import AugmentationConfig
from .data import Dataset
from .errors import CRLSCError, ValidationError
from .fusion import NoiseConfig, FusionResult, pad_neighbours, retrieve_and_fuse
from .pqkb import DEFAULT_TOP_N, KnowledgeBase, PQConfig, SearchResult, adc_search, kb_load, kb_save
from .stage1 import ProbeConfig, TrainConfig, build_private_kb, linear_probe_eval, train_stage1

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_PORT = 7431
ADDR_ENV = "CRLSC_KB_ADDR"
MAX_FRAME = 16 * 1024 * 1024

HELLO = 0x00
QUERY = 0x01
QUERY_RESPONSE = 0x02
INFO = 0x03
INFO_RESPONSE = 0x04
ERROR = 0x7F

# error codes carried in ErrorResponse
E_DIM_MISMATCH = 1
E_OVERSIZED = 2
E_UNKNOWN_TYPE = 3
E_MALFORMED = 4
E_VERSION = 5
E_SEARCH = 6


class NetError(CRLSCError):
    """Base for client-side protocol and transport failures."""


class ProtocolError(NetError):
    pass


class VersionMismatchError(NetError):
    pass


class KBTimeoutError(NetError, TimeoutError):
    pass


class KBConnectionError(NetError, ConnectionError):
    pass


class RemoteError(NetError):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message


# --------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class Hello:
    version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class QueryRequest:
    n: int
    q: np.ndarray  # (d,) float32

    def __eq__(self, other):
        return isinstance(other, QueryRequest) and self.n == other.n and _f32_equal(self.q, other.q)


@dataclass(frozen=True)
class QueryResponse:
    ids: np.ndarray  # (count,) uint64
    dists: np.ndarray  # (count,) float32
    vectors: np.ndarray  # (count, d) float32

    def __eq__(self, other):
        return (
            isinstance(other, QueryResponse)
            and np.array_equal(self.ids, other.ids)
            and _f32_equal(self.dists, other.dists)
            and _f32_equal(self.vectors, other.vectors)
        )


@dataclass(frozen=True)
class InfoRequest:
    pass


@dataclass(frozen=True)
class InfoResponse:
    d: int
    m: int
    k_star: int
    n: int
    source_tag: str


@dataclass(frozen=True)
class ErrorResponse:
    code: int
    message: str


def _f32_equal(a, b) -> bool:
    a = np.asarray(a, dtype="<f4")
    b = np.asarray(b, dtype="<f4")
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError("string too long for the wire")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(payload: bytes, pos: int) -> tuple[str, int]:
    if pos + 2 > len(payload):
        raise ProtocolError("string length truncated")
    (size,) = struct.unpack_from("<H", payload, pos)
    end = pos + 2 + size
    if end > len(payload):
        raise ProtocolError("string body truncated")
    try:
        return payload[pos + 2 : end].decode("utf-8"), end
    except UnicodeDecodeError as exc:
        raise ProtocolError("string is not valid utf-8") from exc


def encode_payload(msg) -> tuple[int, bytes]:
    if isinstance(msg, Hello):
        return HELLO, struct.pack("<B", msg.version)
    if isinstance(msg, QueryRequest):
        q = np.asarray(msg.q, dtype="<f4").reshape(-1)
        return QUERY, struct.pack("<II", msg.n, q.size) + q.tobytes()
    if isinstance(msg, QueryResponse):
        count = len(msg.ids)
        vecs = np.asarray(msg.vectors, dtype="<f4").reshape(count, -1)
        rec = np.dtype([("id", "<u8"), ("dist", "<f4"), ("v", "<f4", (vecs.shape[1],))])
        body = np.empty(count, dtype=rec)
        body["id"] = msg.ids
        body["dist"] = msg.dists
        body["v"] = vecs
        return QUERY_RESPONSE, struct.pack("<I", count) + body.tobytes()
    if isinstance(msg, InfoRequest):
        return INFO, b""
    if isinstance(msg, InfoResponse):
        return INFO_RESPONSE, struct.pack("<IIIQ", msg.d, msg.m, msg.k_star, msg.n) + _pack_str(msg.source_tag)
    if isinstance(msg, ErrorResponse):
        return ERROR, struct.pack("<H", msg.code) + _pack_str(msg.message)
    raise ValidationError(f"cannot encode {type(msg).__name__}")


def encode_frame(msg) -> bytes:
    mtype, payload = encode_payload(msg)
    return struct.pack("<IB", len(payload) + 1, mtype) + payload


def decode_payload(mtype: int, payload: bytes):
    """Parse one payload; raises ``ProtocolError`` on any inconsistency."""
    try:
        if mtype == HELLO:
            if len(payload) != 1:
                raise ProtocolError("hello carries exactly one byte")
            return Hello(payload[0])
        if mtype == QUERY:
            if len(payload) < 8:
                raise ProtocolError("query header truncated")
            n, d = struct.unpack_from("<II", payload)
            if len(payload) != 8 + 4 * d:
                raise ProtocolError(f"query declares d={d} but carries {len(payload) - 8} vector bytes")
            return QueryRequest(n, np.frombuffer(payload, "<f4", d, 8).copy())
        if mtype == QUERY_RESPONSE:
            if len(payload) < 4:
                raise ProtocolError("response header truncated")
            (count,) = struct.unpack_from("<I", payload)
            rest = len(payload) - 4
            if count == 0:
                if rest:
                    raise ProtocolError("empty response with trailing bytes")
                return QueryResponse(np.zeros(0, np.uint64), np.zeros(0, np.float32), np.zeros((0, 0), np.float32))
            if rest % count or (rest // count - 12) % 4 or rest // count < 12:
                raise ProtocolError("response items have inconsistent size")
            d = (rest // count - 12) // 4
            rec = np.dtype([("id", "<u8"), ("dist", "<f4"), ("v", "<f4", (d,))])
            body = np.frombuffer(payload, rec, count, 4)
            return QueryResponse(
                body["id"].astype(np.uint64), body["dist"].astype(np.float32),
                body["v"].reshape(count, d).astype(np.float32),
            )
        if mtype == INFO:
            if payload:
                raise ProtocolError("info request carries no payload")
            return InfoRequest()
        if mtype == INFO_RESPONSE:
            if len(payload) < 20:
                raise ProtocolError("info response truncated")
            d, m, k, n = struct.unpack_from("<IIIQ", payload)
            tag, end = _unpack_str(payload, 20)
            if end != len(payload):
                raise ProtocolError("trailing bytes after info response")
            return InfoResponse(d, m, k, n, tag)
        if mtype == ERROR:
            if len(payload) < 2:
                raise ProtocolError("error response truncated")
            (code,) = struct.unpack_from("<H", payload)
            msg, end = _unpack_str(payload, 2)
            if end != len(payload):
                raise ProtocolError("trailing bytes after error response")
            return ErrorResponse(code, msg)
    except struct.error as exc:
        raise ProtocolError(str(exc)) from exc
    raise ProtocolError(f"unknown message type 0x{mtype:02x}")


def search_response(res: SearchResult) -> QueryResponse:
    return QueryResponse(
        res.ids.astype(np.uint64), res.distances.astype(np.float32), res.vectors.astype(np.float32)
    )


def _recv_exact(sock: socket.socket, size: int) -> bytes | None:
    chunks = []
    while size:
        chunk = sock.recv(min(size, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        size -= len(chunk)
    return b"".join(chunks)


class _Oversized(Exception):
    pass


def read_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    """One ``(type, payload)`` pair, or ``None`` on clean end of stream."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    if length > MAX_FRAME:
        raise _Oversized(length)
    if length == 0:
        raise ProtocolError("zero-length frame has no type byte")
    body = _recv_exact(sock, length)
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    return body[0], body[1:]


# --------------------------------------------------------------------------
# server


class _Handler(socketserver.BaseRequestHandler):
    server: "_KBServer"

    def setup(self) -> None:
        self.request.settimeout(self.server.idle_timeout)

    def _send(self, msg) -> None:
        self.request.sendall(encode_frame(msg))

    def handle(self) -> None:
        try:
            self._serve()
        except OSError:
            # peer vanished mid-reply; nothing left to tell it
            pass

    def _serve(self) -> None:
        kb = self.server.kb
        while True:
            try:
                frame = read_frame(self.request)
            except _Oversized as exc:
                self._send(ErrorResponse(E_OVERSIZED, f"frame of {exc.args[0]} bytes exceeds {MAX_FRAME}"))
                return
            except ProtocolError as exc:
                self._try_send(ErrorResponse(E_MALFORMED, str(exc)))
                return
            except (OSError, socket.timeout):
                return
            if frame is None:
                return
            mtype, payload = frame
            if mtype not in (HELLO, QUERY, INFO):
                self._send(ErrorResponse(E_UNKNOWN_TYPE, f"unknown message type 0x{mtype:02x}"))
                continue
            try:
                msg = decode_payload(mtype, payload)
            except ProtocolError as exc:
                self._send(ErrorResponse(E_MALFORMED, str(exc)))
                return
            if isinstance(msg, Hello):
                if msg.version != PROTOCOL_VERSION:
                    self._send(ErrorResponse(E_VERSION, f"server speaks version {PROTOCOL_VERSION}, got {msg.version}"))
                    return
                self._send(Hello(PROTOCOL_VERSION))
            elif isinstance(msg, InfoRequest):
                cfg = kb.codebook.config
                self._send(InfoResponse(cfg.d, cfg.m, cfg.k_star, len(kb), kb.source_tag))
            else:
                self._send(self.server.answer(msg))

    def _try_send(self, msg) -> None:
        try:
            self._send(msg)
        except OSError:
            pass


class _KBServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, kb: KnowledgeBase, idle_timeout: float) -> None:
        self.kb = kb
        self.idle_timeout = idle_timeout
        super().__init__(addr, _Handler)

    def answer(self, req: QueryRequest):
        if req.q.size != self.kb.d:
            return ErrorResponse(E_DIM_MISMATCH, f"query d={req.q.size} but knowledge base d={self.kb.d}")
        try:
            return search_response(adc_search(req.q.astype(np.float64), self.kb, req.n))
        except CRLSCError as exc:
            return ErrorResponse(E_SEARCH, str(exc))


class KBServer:
    """Handle to a knowledge base served on a background thread."""

    def __init__(self, kb: KnowledgeBase, host: str = "127.0.0.1", port: int = DEFAULT_PORT, idle_timeout: float = 30.0):
        try:
            self._srv = _KBServer((host, port), kb, idle_timeout)
        except OSError as exc:
            raise KBConnectionError(f"cannot bind {host}:{port}: {exc}") from exc
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._srv.server_address[:2]
        return host, port

    @property
    def addr(self) -> str:
        return "%s:%d" % self.address

    def start(self) -> "KBServer":
        if self._thread is not None:
            return self
        self._thread = threading.Thread(target=self._srv.serve_forever, name="kb-server", daemon=True)
        self._thread.start()
        log.info("serving %s (%d entries) on %s", self._srv.kb.source_tag, len(self._srv.kb), self.addr)
        return self

    def serve_forever(self) -> None:
        self._srv.serve_forever()

    def stop(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "KBServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve_kb(kb: KnowledgeBase, bind_address: str | tuple[str, int] = ("127.0.0.1", 0), **kw) -> KBServer:
    """Start serving ``kb``; port 0 picks a free port."""
    host, port = parse_addr(bind_address) if isinstance(bind_address, str) else bind_address
    return KBServer(kb, host, port, **kw).start()


# --------------------------------------------------------------------------
# client


def parse_addr(addr: str | tuple[str, int] | None = None) -> tuple[str, int]:
    if addr is None:
        addr = os.environ.get(ADDR_ENV, f"127.0.0.1:{DEFAULT_PORT}")
    if isinstance(addr, tuple):
        return addr
    host, sep, port = addr.rpartition(":")
    if not sep:
        return addr, DEFAULT_PORT
    try:
        return host or "127.0.0.1", int(port)
    except ValueError as exc:
        raise ValidationError(f"bad address {addr!r}") from exc


class KBClient:
    """Blocking single-connection client. Reconnects lazily after failures."""

    def __init__(self, addr=None, timeout: float = 5.0, version: int = PROTOCOL_VERSION) -> None:
        self.address = parse_addr(addr)
        self.timeout = timeout
        self.version = version
        self._sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        try:
            sock = socket.create_connection(self.address, timeout=self.timeout)
        except socket.timeout as exc:
            raise KBTimeoutError(f"connect to {self.address} timed out") from exc
        except OSError as exc:
            raise KBConnectionError(f"cannot connect to {self.address}: {exc}") from exc
        self._sock = sock
        reply = self._roundtrip(Hello(self.version))
        if isinstance(reply, ErrorResponse) and reply.code == E_VERSION:
            self.close()
            raise VersionMismatchError(reply.message)
        if not isinstance(reply, Hello) or reply.version != self.version:
            self.close()
            raise VersionMismatchError(f"unexpected handshake reply {reply!r}")
        return sock

    def _roundtrip(self, msg):
        sock = self._sock
        try:
            sock.sendall(encode_frame(msg))
            frame = read_frame(sock)
        except socket.timeout as exc:
            self.close()
            raise KBTimeoutError(f"no reply from {self.address} within {self.timeout}s") from exc
        except (_Oversized, ProtocolError) as exc:
            self.close()
            raise ProtocolError(f"bad reply frame: {exc}") from exc
        except OSError as exc:
            self.close()
            raise KBConnectionError(f"connection to {self.address} failed: {exc}") from exc
        if frame is None:
            self.close()
            raise KBConnectionError(f"{self.address} closed the connection")
        return decode_payload(*frame)

    def request(self, msg):
        # a stale connection (e.g. server restarted) gets one fresh attempt
        for attempt in (0, 1):
            fresh = self._sock is None
            if fresh:
                self._connect()
            try:
                return self._roundtrip(msg)
            except KBConnectionError:
                if fresh or attempt:
                    raise

    def info(self) -> InfoResponse:
        reply = self.request(InfoRequest())
        if isinstance(reply, ErrorResponse):
            raise RemoteError(reply.code, reply.message)
        return reply

    def query(self, q, n: int = DEFAULT_TOP_N) -> QueryResponse:
        reply = self.request(QueryRequest(int(n), np.asarray(q, dtype=np.float32).reshape(-1)))
        if isinstance(reply, ErrorResponse):
            raise RemoteError(reply.code, reply.message)
        if not isinstance(reply, QueryResponse):
            raise ProtocolError(f"expected a query response, got {type(reply).__name__}")
        return reply

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self) -> "KBClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def client_query(address, q, n: int = DEFAULT_TOP_N, timeout: float = 5.0):
    """One request on a fresh connection; returns ``(ids, dists, vectors)``."""
    with KBClient(address, timeout) as client:
        res = client.query(q, n)
    return res.ids, res.dists, res.vectors


class RemoteRetriever:
    """Retriever over a served knowledge base, reusing one connection."""

    def __init__(self, address=None, timeout: float = 5.0) -> None:
        self.client = KBClient(address, timeout)

    def __call__(self, queries: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
        vecs, ids = [], []
        for row in np.asarray(queries):
            res = self.client.query(row, n)
            vecs.append(res.vectors.astype(np.float64))
            ids.append(res.ids)
        return pad_neighbours(vecs, ids, n)

    def close(self) -> None:
        self.client.close()


def remote_retrieve_and_fuse(
    address,
    q,
    n: int = DEFAULT_TOP_N,
    noise: NoiseConfig | None = None,
    mode: str = "literal",
    score_with_perturbed: bool = False,
    rng: np.random.Generator | None = None,
    timeout: float = 5.0,
) -> FusionResult:
    retriever = RemoteRetriever(address, timeout)
    try:
        return retrieve_and_fuse(q, retriever, n, noise, mode, score_with_perturbed, rng)
    finally:
        retriever.close()


# --------------------------------------------------------------------------
# two-device transfer


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class DeviceConfig:
    name: str
    dataset: Dataset = field(repr=False)
    train: TrainConfig = TrainConfig()
    aug: AugmentationConfig = AugmentationConfig()


class TransferStageError(CRLSCError):
    def __init__(self, stage: str, cause: Exception) -> None:
        super().__init__(f"transfer stage {stage!r} failed: {cause}")
        self.stage = stage


def transfer_demo(
    skb_path,
    device_a: DeviceConfig,
    device_b: DeviceConfig,
    test_set: Dataset,
    classes: int,
    pkb_config: PQConfig,
    out_dir,
    probe: ProbeConfig | None = None,
    host: str = "127.0.0.1",
) -> dict:
    """Server SKB guides device A; A's private KB then guides device B.

    Device B is also trained once with fusion disabled under the same seeds
    and budget, which is the baseline its guided probe is compared to.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {"devices": {}, "kbs": {}}
    stage = "load-skb"
    try:
        skb = kb_load(skb_path)
        report["kbs"]["skb"] = {"path": str(skb_path), "sha256": file_sha256(skb_path), "entries": len(skb)}

        stage = "device-a-train"
        with serve_kb(skb, (host, 0)) as srv:
            retr = RemoteRetriever(srv.addr)
            try:
                res_a = train_stage1(device_a.dataset, retr, device_a.train, device_a.aug)
            finally:
                retr.close()

        stage = "device-a-pkb"
        pkb = build_private_kb(res_a.encoder, device_a.dataset, pkb_config, tag=device_a.name)
        pkb_path = out / f"pkb_{device_a.name}.crkb"
        kb_save(pkb, pkb_path)
        report["kbs"]["pkb"] = {"path": str(pkb_path), "sha256": file_sha256(pkb_path), "entries": len(pkb)}

        stage = "device-b-train"
        with serve_kb(kb_load(pkb_path), (host, 0)) as srv:
            retr = RemoteRetriever(srv.addr)
            try:
                res_b = train_stage1(device_b.dataset, retr, device_b.train, device_b.aug)
            finally:
                retr.close()

        stage = "device-b-baseline"
        res_base = train_stage1(device_b.dataset, None, replace(device_b.train, fusion=False), device_b.aug)

        stage = "probe"
        for name, dev, res in (
            (device_a.name, device_a, res_a),
            (device_b.name, device_b, res_b),
            (f"{device_b.name}-baseline", device_b, res_base),
        ):
            pr = linear_probe_eval(res.encoder, dev.dataset, test_set, classes, probe)
            report["devices"][name] = {
                "top1": pr.top1,
                "top5": pr.top5,
                "losses": [m.loss for m in res.metrics],
            }
    except Exception as exc:
        raise TransferStageError(stage, exc) from exc
    b = report["devices"]
    report["device_b_beats_baseline"] = b[device_b.name]["top1"] > b[f"{device_b.name}-baseline"]["top1"]
    return report
