"""Protocol messages and FIFO-per-link transports.

Wire frame: ``length:u32 | kind:u8 | seq:u64 | payload`` where ``length``
counts the bytes after itself and the payload is an encoded tensor.
"""

from __future__ import annotations

import enum
import queue
import socket
import threading
import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from .serialization import FormatError, decode_tensor, encode_tensor


class Kind(enum.IntEnum):
    ACTIVATION = 1
    GRADIENT = 2
    PSEUDO_LABELS = 3
    CONTROL = 4


class OutOfOrder(RuntimeError):
    pass


@dataclass
class ProtocolMessage:
    kind: Kind
    payload: np.ndarray
    link: tuple  # (from_role, to_role)
    seq: int = -1


def encode_frame(msg: ProtocolMessage) -> bytes:
    body = struct.pack("<BQ", int(msg.kind), msg.seq) + encode_tensor(msg.payload)
    return struct.pack("<I", len(body)) + body


def decode_frame(data: bytes, link=("?", "?")) -> ProtocolMessage:
    if len(data) < 13:
        raise FormatError("frame too short")
    (length,) = struct.unpack_from("<I", data)
    if length != len(data) - 4:
        raise FormatError(f"frame length {length} does not match {len(data) - 4} body bytes")
    kind, seq = struct.unpack_from("<BQ", data, 4)
    return ProtocolMessage(Kind(kind), decode_tensor(data[13:]), tuple(link), seq)


class InProcTransport:
    """Deterministic in-memory transport; the reference implementation."""

    def __init__(self):
        self._queues: dict = {}
        self._next_seq: dict = {}
        self._last_seen: dict = {}
        self.log: list = []

    def send(self, msg: ProtocolMessage) -> None:
        seq = self._next_seq.get(msg.link, 0)
        self._next_seq[msg.link] = seq + 1
        msg.seq = seq
        self.log.append((msg.link, msg.kind, msg.payload.shape, seq))
        self._enqueue(msg)

    def _enqueue(self, msg):
        self._queues.setdefault(msg.link, deque()).append(msg)

    def _dequeue(self, link):
        return self._queues[link].popleft()

    def pending_links(self) -> list:
        return [link for link, q in self._queues.items() if q]

    def recv(self, link) -> ProtocolMessage:
        msg = self._dequeue(link)
        last = self._last_seen.get(link, -1)
        if msg.seq <= last:
            raise OutOfOrder(f"link {link}: sequence {msg.seq} after {last}")
        self._last_seen[link] = msg.seq
        return msg

    def close(self) -> None:
        pass


class TcpTransport(InProcTransport):
    """Same contract, but every message crosses a loopback TCP connection.

    One connection per directed link, created lazily; a reader thread per link
    drains frames into a local FIFO so large payloads never block the sender.
    Delivery order is still driven by the caller, so results match
    :class:`InProcTransport` exactly.
    """

    def __init__(self, host: str = "127.0.0.1"):
        super().__init__()
        self._host = host
        self._socks: dict = {}
        self._inbox: dict = {}

    def _pair(self, link):
        if link not in self._socks:
            listener = socket.create_server((self._host, 0))
            tx = socket.create_connection(listener.getsockname())
            rx, _ = listener.accept()
            listener.close()
            inbox = queue.Queue()
            reader = threading.Thread(target=_reader, args=(rx, link, inbox), daemon=True)
            reader.start()
            self._socks[link] = (tx, rx, reader)
            self._inbox[link] = inbox
        return self._socks[link][0]

    def _enqueue(self, msg):
        self._pair(msg.link).sendall(encode_frame(msg))
        self._queues.setdefault(msg.link, deque()).append(None)

    def _dequeue(self, link):
        self._queues[link].popleft()
        item = self._inbox[link].get(timeout=30)
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        for tx, rx, reader in self._socks.values():
            tx.close()
            reader.join(timeout=5)
            rx.close()
        self._socks.clear()


def _reader(sock, link, inbox) -> None:
    while True:
        try:
            head = sock.recv(4, socket.MSG_WAITALL)
            if not head:
                return
            head = _complete(sock, head, 4)
            (length,) = struct.unpack("<I", head)
            inbox.put(decode_frame(head + _recv_exact(sock, length), link))
        except Exception as exc:  # surfaced to the consumer on its next recv
            inbox.put(exc)
            return


def _complete(sock, data: bytes, n: int) -> bytes:
    return data if len(data) == n else data + _recv_exact(sock, n - len(data))


def _recv_exact(sock, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def make_transport(name: str):
    if name == "inproc":
        return InProcTransport()
    if name == "tcp":
        return TcpTransport()
    raise ValueError(f"unknown transport {name!r}")
