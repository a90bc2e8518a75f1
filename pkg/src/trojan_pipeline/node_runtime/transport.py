"""Reliable ordered byte streams: in-memory pipes or loopback TCP, same interface."""
from __future__ import annotations

import itertools
import queue
import socket
import threading
import time


class StreamClosed(EOFError):
    pass


class ByteStream:
    """Buffered receive side shared by both transports.

    Subclasses implement ``send``, ``close`` and ``_recv_raw(timeout)``, which
    returns available bytes, ``b""`` at end of stream, or raises TimeoutError.
    """

    def __init__(self):
        self._pending = bytearray()

    def recv_exact(self, n: int, timeout: float | None = None) -> bytes:
        deadline = None if timeout is None else time.monotonic() + timeout
        while len(self._pending) < n:
            remaining = None if deadline is None else max(deadline - time.monotonic(), 0.0)
            if remaining == 0.0:
                raise TimeoutError(f"timed out waiting for {n} bytes")
            chunk = self._recv_raw(remaining)
            if not chunk:
                raise StreamClosed(f"stream closed with {len(self._pending)}/{n} bytes pending")
            self._pending += chunk
        out = bytes(self._pending[:n])
        del self._pending[:n]
        return out

    def recv_some(self, timeout: float | None = None) -> bytes:
        if self._pending:
            out = bytes(self._pending)
            self._pending.clear()
            return out
        chunk = self._recv_raw(timeout)
        if not chunk:
            raise StreamClosed("stream closed")
        return chunk

    def unread(self, data: bytes) -> None:
        self._pending[:0] = data

    @property
    def partial(self) -> bool:
        return bool(self._pending)


# ---------------------------------------------------------------------------
# in-process
# ---------------------------------------------------------------------------

class _Pipe:
    def __init__(self):
        self.buf = bytearray()
        self.closed = False
        self.cond = threading.Condition()

    def write(self, data: bytes) -> None:
        with self.cond:
            if self.closed:
                raise ConnectionResetError("peer closed the channel")
            self.buf += data
            self.cond.notify()

    def read(self, timeout: float | None) -> bytes:
        with self.cond:
            if not self.cond.wait_for(lambda: self.buf or self.closed, timeout):
                raise TimeoutError("no data")
            out = bytes(self.buf)
            self.buf.clear()
            return out

    def close(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify_all()


class InProcStream(ByteStream):
    def __init__(self, rx: _Pipe, tx: _Pipe):
        super().__init__()
        self._rx, self._tx = rx, tx

    def send(self, data: bytes) -> None:
        self._tx.write(data)

    def _recv_raw(self, timeout):
        return self._rx.read(timeout)

    def close(self) -> None:
        self._tx.close()
        self._rx.close()


class InProcListener:
    def __init__(self, transport: "InProcTransport", address):
        self.address = address
        self._transport = transport
        self._queue: queue.Queue = queue.Queue()
        self.closed = False

    def accept(self, timeout: float | None = None) -> InProcStream:
        if self.closed:
            raise OSError("listener closed")
        try:
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no incoming connection") from None

    def close(self) -> None:
        self.closed = True
        self._transport._unregister(self.address)


class InProcTransport:
    """Named in-memory endpoints standing in for ``(host, port)`` sockets."""

    name = "inproc"

    def __init__(self):
        self._listeners: dict = {}
        self._lock = threading.Lock()
        self._ports = itertools.count(40000)

    def listen(self, host: str = "inproc", port: int = 0) -> InProcListener:
        with self._lock:
            if port == 0:
                port = next(p for p in self._ports if (host, p) not in self._listeners)
            address = (host, port)
            if address in self._listeners:
                raise OSError(f"address {address} already in use")
            listener = InProcListener(self, address)
            self._listeners[address] = listener
            return listener

    def connect(self, host: str, port: int, timeout: float | None = None) -> InProcStream:
        with self._lock:
            listener = self._listeners.get((host, port))
        if listener is None or listener.closed:
            raise ConnectionRefusedError(f"nothing listening on {host}:{port}")
        a, b = _Pipe(), _Pipe()
        listener._queue.put(InProcStream(rx=a, tx=b))
        return InProcStream(rx=b, tx=a)

    def _unregister(self, address) -> None:
        with self._lock:
            self._listeners.pop(address, None)


# ---------------------------------------------------------------------------
# loopback TCP
# ---------------------------------------------------------------------------

class TcpStream(ByteStream):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, data: bytes) -> None:
        self.sock.settimeout(None)
        self.sock.sendall(data)

    def _recv_raw(self, timeout):
        self.sock.settimeout(timeout)
        try:
            return self.sock.recv(1 << 16)
        except socket.timeout:
            raise TimeoutError("no data") from None
        except (ConnectionResetError, OSError):
            return b""

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpListener:
    def __init__(self, host: str, port: int):
        self.sock = socket.create_server((host, port))
        self.address = self.sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> TcpStream:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise TimeoutError("no incoming connection") from None
        return TcpStream(conn)

    def close(self) -> None:
        self.sock.close()


class TcpTransport:
    name = "tcp"

    def listen(self, host: str = "127.0.0.1", port: int = 0) -> TcpListener:
        return TcpListener(host, port)

    def connect(self, host: str, port: int, timeout: float | None = 5.0) -> TcpStream:
        return TcpStream(socket.create_connection((host, port), timeout=timeout))


def make_transport(kind: str):
    if kind == "inproc":
        return InProcTransport()
    if kind == "tcp":
        return TcpTransport()
    raise ValueError(f"unknown transport {kind!r} (expected inproc or tcp)")
