"""Wire protocol and process roles for running the async protocol over TCP.

Frames are a 4-byte big-endian length followed by that many bytes of UTF-8
JSON.  Parameter vectors travel as base64 of consecutive little-endian
float64 values, so weights round-trip bit-exactly.  One server process talks
to N client processes; each connection is strict request/response and every
``model_up`` is aggregated inside a single serialized critical section.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .client import ClientConfig, local_train
from .core import ClientUpdate, GlobalState, ParamVector, ProtocolViolationError
from .server import assign_local_iterations, async_aggregate
from .sim import ExperimentTrace, SimConfig, TraceRow, _metrics_for_row

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_PORT",
    "FrameError",
    "encode_weights",
    "decode_weights",
    "encode_frame",
    "decode_frame",
    "read_frame",
    "write_frame",
    "FederatedServer",
    "serve",
    "run_client",
]

DEFAULT_PORT = 7070
MAX_PAYLOAD_BYTES = 1 << 26  # refuse absurd frames before allocating

MESSAGE_FIELDS = {
    "hello": ("client_id", "shard_size"),
    "model_down": ("t", "h_assign", "weights"),
    "model_up": ("tau", "client_id", "weights"),
    "bye": (),
    "error": ("code", "detail"),
}


class FrameError(ProtocolViolationError):
    """A frame or message failed to parse or validate."""


def encode_weights(w: ParamVector) -> str:
    """Base64 (standard alphabet, padded) of the vector as little-endian float64s."""
    return base64.b64encode(w.values.astype("<f8").tobytes()).decode("ascii")


def decode_weights(text: str) -> ParamVector:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise FrameError(f"invalid base64 weights: {exc}") from None
    if len(raw) % 8 != 0:
        raise FrameError(f"weight byte count {len(raw)} not divisible by 8")
    return ParamVector(np.frombuffer(raw, dtype="<f8"))


def _validate_message(message: dict) -> dict:
    if not isinstance(message, dict):
        raise FrameError("payload is not a JSON object")
    mtype = message.get("type")
    if mtype not in MESSAGE_FIELDS:
        raise FrameError(f"unknown message type {mtype!r}")
    missing = [f for f in MESSAGE_FIELDS[mtype] if f not in message]
    if missing:
        raise FrameError(f"{mtype} message missing fields {missing}")
    return message


def encode_frame(message: dict) -> bytes:
    """Serialize a message as one length-prefixed frame."""
    _validate_message(message)
    payload = json.dumps(message, separators=(",", ":")).encode("utf-8")
    if len(payload) > MAX_PAYLOAD_BYTES:
        raise FrameError(f"payload of {len(payload)} bytes exceeds limit")
    return struct.pack(">I", len(payload)) + payload


def decode_frame(data: bytes) -> dict:
    """Parse exactly one frame; the buffer must contain it in full, and nothing else."""
    if len(data) < 4:
        raise FrameError(f"frame truncated: {len(data)} bytes, need 4-byte length prefix")
    (n,) = struct.unpack(">I", data[:4])
    if len(data) - 4 != n:
        raise FrameError(f"length prefix says {n} payload bytes, got {len(data) - 4}")
    try:
        message = json.loads(data[4:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"bad payload: {exc}") from None
    return _validate_message(message)


def read_frame(sock: socket.socket) -> Optional[dict]:
    """Read one frame from a stream; None on clean EOF at a frame boundary."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (n,) = struct.unpack(">I", header)
    if n > MAX_PAYLOAD_BYTES:
        raise FrameError(f"peer announced {n}-byte payload, over limit")
    payload = _recv_exact(sock, n) if n else b""
    if payload is None:
        raise FrameError("connection closed mid-frame")
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"bad payload: {exc}") from None
    return _validate_message(message)


def write_frame(sock: socket.socket, message: dict) -> None:
    sock.sendall(encode_frame(message))


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    """Exactly n bytes, None on EOF before the first byte, FrameError mid-buffer."""
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if got == 0:
                return None
            raise FrameError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class FederatedServer:
    """One aggregation server: accepts hellos, aggregates model_ups, says bye.

    The server performs exactly ``hp.e_total`` aggregations; a client whose
    update arrives later receives ``bye`` instead of a fresh model.  Call
    `start` to bind (the chosen port is then in ``address``), `wait` to block
    until the run completes.
    """

    def __init__(
        self,
        cfg: SimConfig,
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        expected_clients: Optional[int] = None,
        io_timeout_s: float = 60.0,
    ) -> None:
        self.cfg = cfg
        self.host = host
        self.port = port
        self.expected_clients = expected_clients if expected_clients is not None else cfg.n_clients
        self.io_timeout_s = io_timeout_s
        self._lock = threading.Lock()
        self._state = GlobalState(w=cfg.w0)
        self._trace = ExperimentTrace()
        self._started = time.monotonic()
        self._finished_clients = 0
        self._hello_count = 0
        self._all_helloed = threading.Event()
        self._all_done = threading.Event()
        self._listener: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        if self._listener is None:
            raise RuntimeError("server not started")
        return self._listener.getsockname()[:2]

    def start(self) -> "FederatedServer":
        self._listener = socket.create_server((self.host, self.port))
        self._listener.settimeout(0.2)
        self._started = time.monotonic()
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        accept.start()
        self._threads.append(accept)
        return self

    def wait(self, timeout: Optional[float] = None) -> tuple[ParamVector, ExperimentTrace]:
        if not self._all_done.wait(timeout):
            raise TimeoutError("federated run did not finish in time")
        if self._listener is not None:
            self._listener.close()
        return self._state.w, self._trace

    # -- internals ---------------------------------------------------------

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._all_done.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(self.io_timeout_s)
            worker = threading.Thread(target=self._handle, args=(conn,), daemon=True)
            worker.start()
            self._threads.append(worker)

    def _done(self) -> bool:
        return self._state.aggregations >= self.cfg.hp.e_total

    def _client_finished(self) -> None:
        with self._lock:
            self._finished_clients += 1
            if self._done() and self._finished_clients >= self.expected_clients:
                self._all_done.set()

    def _handle(self, conn: socket.socket) -> None:
        client_id = None
        try:
            with conn:
                hello = read_frame(conn)
                if hello is None:
                    return
                if hello["type"] != "hello":
                    write_frame(conn, {
                        "type": "error", "code": "handshake_required",
                        "detail": f"expected hello, got {hello['type']}",
                    })
                    return
                client_id = str(hello["client_id"])
                # Hold the first dispatch until every expected client has
                # helloed, so all clients start from (w0, 0) exactly like the
                # simulator and an arrival-order replay reproduces the run.
                with self._lock:
                    self._hello_count += 1
                    if self._hello_count >= self.expected_clients:
                        self._all_helloed.set()
                if not self._all_helloed.wait(self.io_timeout_s):
                    write_frame(conn, {
                        "type": "error", "code": "start_timeout",
                        "detail": "not all expected clients joined in time",
                    })
                    return
                first = self._dispatch(client_id)
                write_frame(conn, first)
                if first["type"] == "bye":
                    self._client_finished()
                    return
                while True:
                    msg = read_frame(conn)
                    if msg is None:
                        return
                    if msg["type"] != "model_up":
                        write_frame(conn, {
                            "type": "error", "code": "unexpected_message",
                            "detail": f"expected model_up, got {msg['type']}",
                        })
                        return
                    reply = self._aggregate(msg)
                    write_frame(conn, reply)
                    if reply["type"] == "bye":
                        self._client_finished()
                        return
        except FrameError as exc:
            log.warning("protocol error from client %r: %s", client_id, exc)
            try:
                write_frame(conn, {"type": "error", "code": "protocol_error", "detail": str(exc)})
            except OSError:
                pass
        except ProtocolViolationError as exc:
            log.warning("violation from client %r: %s", client_id, exc)
            try:
                write_frame(conn, {
                    "type": "error", "code": "stale_protocol_violation", "detail": str(exc),
                })
            except OSError:
                pass
        except OSError as exc:
            log.warning("connection to client %r lost: %s", client_id, exc)

    def _dispatch(self, client_id: str) -> dict:
        with self._lock:
            if self._done():
                return {"type": "bye"}
            h = assign_local_iterations(self.cfg.policy, client_id, self.cfg.hp)
            return {
                "type": "model_down",
                "t": self._state.t,
                "h_assign": h,
                "weights": encode_weights(self._state.w),
            }

    def _aggregate(self, msg: dict) -> dict:
        client_id = str(msg["client_id"])
        tau = int(msg["tau"])
        w_new = decode_weights(msg["weights"])
        with self._lock:
            if self._done():
                return {"type": "bye"}
            update = ClientUpdate(
                w_new=w_new, tau=tau, client_id=client_id, local_iterations_done=0
            )
            self._state, rec = async_aggregate(
                self._state, update, self.cfg.hp,
                timestamp=time.monotonic() - self._started,
            )
            loss, grad_sq, acc = _metrics_for_row(self.cfg, self._state)
            self._trace.rows.append(
                TraceRow(
                    self._state.t, rec.timestamp, loss, grad_sq, acc,
                    rec.staleness, rec.beta_t, client_id,
                )
            )
            if self._done():
                return {"type": "bye"}
            h = assign_local_iterations(self.cfg.policy, client_id, self.cfg.hp)
            return {
                "type": "model_down",
                "t": self._state.t,
                "h_assign": h,
                "weights": encode_weights(self._state.w),
            }


def serve(
    bind_address: tuple[str, int],
    cfg: SimConfig,
    timeout_s: Optional[float] = None,
) -> tuple[ParamVector, ExperimentTrace]:
    """Run one complete server lifetime: bind, aggregate e_total updates, bye all."""
    server = FederatedServer(cfg, host=bind_address[0], port=bind_address[1]).start()
    return server.wait(timeout_s)


def run_client(
    server_address: tuple[str, int],
    cfg: ClientConfig,
    max_retries: int = 5,
    backoff_s: float = 0.1,
    io_timeout_s: float = 60.0,
) -> int:
    """Client process loop: hello, then train/upload until the server says bye.

    Connection loss or a malformed frame triggers a reconnect with exponential
    backoff; returns 0 on a clean bye, 4 after exhausting retries.
    """
    attempt = 0
    while attempt <= max_retries:
        try:
            with socket.create_connection(server_address, timeout=io_timeout_s) as sock:
                write_frame(sock, {
                    "type": "hello",
                    "client_id": cfg.client_id,
                    "shard_size": len(cfg.shard),
                })
                while True:
                    msg = read_frame(sock)
                    if msg is None:
                        raise FrameError("server closed the connection unexpectedly")
                    if msg["type"] == "bye":
                        return 0
                    if msg["type"] == "error":
                        raise FrameError(f"server error {msg['code']}: {msg['detail']}")
                    if msg["type"] != "model_down":
                        raise FrameError(f"unexpected {msg['type']} from server")
                    w_t = decode_weights(msg["weights"])
                    update = local_train(cfg, w_t, int(msg["t"]), int(msg["h_assign"]))
                    write_frame(sock, {
                        "type": "model_up",
                        "tau": update.tau,
                        "client_id": update.client_id,
                        "weights": encode_weights(update.w_new),
                    })
        except (FrameError, OSError) as exc:
            attempt += 1
            log.warning(
                "client %r: %s (attempt %d/%d)", cfg.client_id, exc, attempt, max_retries
            )
            if attempt > max_retries:
                return 4
            time.sleep(backoff_s * (2.0 ** (attempt - 1)))
    return 4
