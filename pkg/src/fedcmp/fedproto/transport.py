"""Transports carrying encoded messages between the coordinator and sites.

Every transport exposes ``exchange(round_no, message, sites, timeout)``: the
same request bytes go to every listed site and the replies come back keyed by
site id. Any site that cannot be reached, or does not answer before the
timeout, turns the whole exchange into :class:`SessionAborted`.
"""

from __future__ import annotations

import os
import socket
import socketserver
import struct
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError, SessionAborted
from .site import SiteWorker

FRAME_HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 30


@dataclass(frozen=True)
class LogEvent:
    round_no: int
    site: int
    direction: str  # "request" or "reply"
    nbytes: int


class Transport:
    def __init__(self):
        self.log: list[LogEvent] = []
        self._log_lock = threading.Lock()

    def _record(self, round_no: int, site: int, direction: str, nbytes: int) -> None:
        with self._log_lock:
            self.log.append(LogEvent(round_no, site, direction, nbytes))

    def round_trips(self) -> dict:
        """Completed request/reply pairs per site."""
        out: dict[int, int] = {}
        for ev in self.log:
            if ev.direction == "reply":
                out[ev.site] = out.get(ev.site, 0) + 1
        return out

    def exchange(self, round_no: int, message: bytes, sites, timeout: float) -> dict:
        raise NotImplementedError


# in-process -------------------------------------------------------------------


class InProcessTransport(Transport):
    """Direct calls into :class:`SiteWorker` objects.

    ``order`` fixes the order sites are served in (reply order); ``hook`` is
    called as ``hook(round_no, transport)`` before each round and may
    :meth:`drop` sites to simulate failures.
    """

    def __init__(self, workers, order=None, hook=None):
        super().__init__()
        if not isinstance(workers, dict):
            workers = {w.site: w for w in workers}
        self.workers = dict(workers)
        self.order = None if order is None else list(order)
        self.hook = hook
        self.dropped: set = set()

    def drop(self, site: int) -> None:
        self.dropped.add(site)

    def exchange(self, round_no, message, sites, timeout):
        if self.hook is not None:
            self.hook(round_no, self)
        sites = list(sites)
        order = sites if self.order is None else [s for s in self.order if s in sites]
        missing = [s for s in sites if s not in order or s not in self.workers or s in self.dropped]
        if missing:
            raise SessionAborted(f"round {round_no}: sites {missing} unreachable")
        replies = {}
        for s in order:
            self._record(round_no, s, "request", len(message))
            reply = self.workers[s].handle(message)
            self._record(round_no, s, "reply", len(reply))
            replies[s] = reply
        return replies


# directory exchange ---------------------------------------------------------------


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def wait_for(path: Path, timeout: float, poll: float, stop: threading.Event | None = None) -> bytes | None:
    deadline = time.monotonic() + timeout
    while True:
        if path.exists():
            return path.read_bytes()
        if time.monotonic() >= deadline or (stop is not None and stop.is_set()):
            return None
        time.sleep(poll)


class DirectoryTransport(Transport):
    """Exchange through files in one session directory.

    Layout: ``session.json`` (round-one request), ``round1/<site>.json``,
    ``broadcast.json``, ``round2/<site>.json``; the operator writes
    ``report.csv`` after a successful session.
    """

    REQUEST_FILES = {1: "session.json", 2: "broadcast.json"}

    def __init__(self, session_dir, poll: float = 0.01):
        super().__init__()
        self.session_dir = Path(session_dir)
        self.poll = poll

    def exchange(self, round_no, message, sites, timeout):
        if round_no not in self.REQUEST_FILES:
            raise ConfigError(f"directory transport has no round {round_no}")
        req = self.session_dir / self.REQUEST_FILES[round_no]
        if req.exists():
            raise ConfigError(f"{req} already exists; use a fresh session directory")
        atomic_write(req, message)
        sites = list(sites)
        for s in sites:
            self._record(round_no, s, "request", len(message))
        replies, deadline = {}, time.monotonic() + timeout
        for s in sites:
            path = self.session_dir / f"round{round_no}" / f"{s}.json"
            data = wait_for(path, max(0.0, deadline - time.monotonic()), self.poll)
            if data is None:
                late = [t for t in sites if t not in replies]
                raise SessionAborted(f"round {round_no}: no reply from sites {late} within {timeout} s")
            self._record(round_no, s, "reply", len(data))
            replies[s] = data
        return replies


def serve_directory_site(session_dir, worker: SiteWorker, timeout: float = 60.0, poll: float = 0.01,
                         stop: threading.Event | None = None) -> bool:
    """Answer both rounds of one directory session. Returns False on timeout."""
    session_dir = Path(session_dir)
    for round_no, name in DirectoryTransport.REQUEST_FILES.items():
        data = wait_for(session_dir / name, timeout, poll, stop)
        if data is None:
            return False
        atomic_write(session_dir / f"round{round_no}" / f"{worker.site}.json", worker.handle(data))
    return True


# TCP -----------------------------------------------------------------------------


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(FRAME_HEADER.pack(len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes:
    (n,) = FRAME_HEADER.unpack(_recv_exact(sock, FRAME_HEADER.size))
    if n > MAX_FRAME:
        raise ConnectionError(f"frame of {n} bytes exceeds the limit")
    return _recv_exact(sock, n)


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        self.request.settimeout(self.server.io_timeout)
        try:
            request = recv_frame(self.request)
            send_frame(self.request, self.server.worker.handle(request))
        except (ConnectionError, OSError):
            return


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    # handler threads are joined on close so a reply in flight is never cut off
    daemon_threads = False
    block_on_close = True
    io_timeout = 60.0


class SiteServer:
    """TCP endpoint for one site: one length-prefixed request and reply per connection."""

    def __init__(self, worker: SiteWorker, host: str = "127.0.0.1", port: int = 0):
        self.worker = worker
        self._server = _Server((host, port), _FrameHandler)
        self._server.worker = worker
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple:
        return self._server.server_address[:2]

    def serve_forever(self) -> None:
        self._server.serve_forever(poll_interval=0.05)

    def start(self) -> "SiteServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class TcpTransport(Transport):
    def __init__(self, addresses: dict):
        super().__init__()
        self.addresses = {int(s): (str(h), int(p)) for s, (h, p) in addresses.items()}

    def _call(self, round_no, site, message, timeout):
        addr = self.addresses.get(site)
        if addr is None:
            raise SessionAborted(f"round {round_no}: no address for site {site}")
        try:
            with socket.create_connection(addr, timeout=timeout) as sock:
                sock.settimeout(timeout)
                self._record(round_no, site, "request", len(message))
                send_frame(sock, message)
                reply = recv_frame(sock)
        except (OSError, ConnectionError) as exc:
            raise SessionAborted(f"round {round_no}: site {site} at {addr[0]}:{addr[1]} failed: {exc}") from exc
        self._record(round_no, site, "reply", len(reply))
        return reply

    def exchange(self, round_no, message, sites, timeout):
        sites = list(sites)
        with ThreadPoolExecutor(max_workers=max(1, len(sites))) as pool:
            futures = {s: pool.submit(self._call, round_no, s, message, timeout) for s in sites}
            return {s: f.result() for s, f in futures.items()}
