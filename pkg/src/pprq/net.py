"""TCP daemons for the two clouds and the socket client used by the user tool.

One connection carries one query session: the user dials both clouds, and the
primary cloud dials the secondary once per session, so the session id in each
frame is unique per live connection.  Within a connection there is a single
reader and a single writer.  The channel itself is plaintext; deployments are
expected to terminate TLS or tunnel in front of the daemons, since the
protocol assumes a secure transport and adds no encryption of its own.

Daemons refuse deterministic seeding unless it arrives via the explicitly
unsafe configuration switch; see `pprq.cli`.
"""

from __future__ import annotations

import logging
import queue
import random
import secrets
import socket
import struct
import threading
from dataclasses import dataclass

from . import wire
from .paillier import KeyShare, PublicKey, SecretKey
from .protocols import ProtocolError
from .query import (
    PrimaryCloudSession,
    QueryRejected,
    RangeQuery,
    SecondaryCloudSession,
    UserAgent,
)
from .store import EncryptedTable
from .wire import Frame

log = logging.getLogger("pprq.net")

DEFAULT_TIMEOUT = 120.0


class TransportError(ProtocolError):
    """Connection failed or closed mid-frame."""


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address {text!r} is not host:port")
    return host or "127.0.0.1", int(port)


class Conn:
    """A framed, blocking socket wrapper."""

    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT):
        self.sock = sock
        sock.settimeout(timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._wlock = threading.Lock()

    @classmethod
    def connect(cls, address: tuple[str, int], timeout: float = DEFAULT_TIMEOUT) -> "Conn":
        try:
            return cls(socket.create_connection(address, timeout=timeout), timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {address[0]}:{address[1]}: {exc}") from exc

    def send_frame(self, frame: Frame) -> None:
        raw = wire.encode_frame(frame)
        with self._wlock:
            try:
                self.sock.sendall(raw)
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc

    def _read_exact(self, count: int) -> bytes | None:
        chunks, got = [], 0
        while got < count:
            try:
                part = self.sock.recv(count - got)
            except socket.timeout as exc:
                raise TransportError("timed out waiting for a frame") from exc
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not part:
                if got == 0 and not chunks:
                    return None
                raise TransportError("connection closed mid-frame")
            chunks.append(part)
            got += len(part)
        return b"".join(chunks)

    def recv_frame(self) -> Frame | None:
        """Next frame, or None on clean end of stream."""
        head = self._read_exact(4)
        if head is None:
            return None
        (length,) = struct.unpack(">I", head)
        if length > wire.MAX_FRAME_LEN:
            raise wire.FrameError(f"frame of {length} bytes exceeds the cap")
        body = self._read_exact(length)
        if body is None:
            raise TransportError("connection closed mid-frame")
        return wire.decode_frame(head + body)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class SocketChannel:
    """C1's request/stream view of its per-session connection to C2."""

    def __init__(self, conn: Conn):
        self.conn = conn

    def request(self, frames: list[Frame]) -> list[Frame]:
        for frame in frames:
            self.conn.send_frame(frame)
        replies = {}
        for _ in frames:
            reply = self.conn.recv_frame()
            if reply is None:
                raise TransportError("peer closed during an exchange")
            if reply.msg_type == wire.MSG_ERROR:
                raise QueryRejected(*wire.parse_error(reply.payload))
            replies[reply.seq] = reply
        return [replies[f.seq] for f in frames]

    def send(self, frame: Frame) -> None:
        self.conn.send_frame(frame)

    def read_stream(self):
        while True:
            frame = self.conn.recv_frame()
            if frame is None:
                raise TransportError("peer closed before finishing its stream")
            if frame.msg_type == wire.MSG_ERROR:
                raise QueryRejected(*wire.parse_error(frame.payload))
            if frame.msg_type == wire.MSG_DONE:
                return
            yield frame


class _Daemon:
    """Accept loop shared by both cloud daemons."""

    def __init__(self, listen: tuple[str, int], timeout: float):
        self.listen_addr = listen
        self.timeout = timeout
        self._server: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()

    @property
    def port(self) -> int:
        return self._server.getsockname()[1]

    def start(self) -> None:
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind(self.listen_addr)
        server.listen(32)
        server.settimeout(0.5)
        self._server = server
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        accept.start()
        self._threads.append(accept)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, peer = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            worker = threading.Thread(
                target=self._guarded_handle, args=(Conn(sock, self.timeout), peer), daemon=True
            )
            worker.start()
            self._threads.append(worker)

    def _guarded_handle(self, conn: Conn, peer) -> None:
        try:
            self.handle_connection(conn, peer)
        except (TransportError, wire.FrameError, ProtocolError) as exc:
            log.warning("connection from %s failed: %s", peer, exc)
        except Exception:
            log.exception("connection from %s crashed", peer)
        finally:
            conn.close()

    def handle_connection(self, conn: Conn, peer) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stopping.wait(0.5):
                pass
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def stop(self) -> None:
        self._stopping.set()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass


def _send_error(conn: Conn, session_id: bytes, code: int, message: str) -> None:
    try:
        conn.send_frame(Frame(wire.MSG_ERROR, session_id, 0, wire.pack_error(code, message)))
    except TransportError:
        pass


class PrimaryCloudDaemon(_Daemon):
    """Serves the encrypted table: accepts user sessions and drives the
    per-query computation against the secondary cloud."""

    def __init__(
        self,
        table: EncryptedTable,
        listen: tuple[str, int],
        peer: tuple[str, int],
        *,
        share: KeyShare | None = None,
        allowlist: set[str] | None = None,
        window: int = 8,
        rng: random.Random | None = None,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        super().__init__(listen, timeout)
        self.table = table
        self.peer = peer
        self.share = share
        self.allowlist = allowlist
        self.window = window
        self.rng = rng or random.SystemRandom()

    def _ping_info(self) -> bytes:
        t = self.table
        return wire.pack_ping_info(t.bits, t.m, t.n, t.w)

    def handle_connection(self, conn: Conn, peer) -> None:
        hello_frame = None
        while True:
            frame = conn.recv_frame()
            if frame is None:
                return
            if frame.msg_type == wire.MSG_PING:
                conn.send_frame(Frame(wire.MSG_PING, frame.session_id, 0, self._ping_info()))
                continue
            hello_frame = frame
            break
        if hello_frame.msg_type != wire.MSG_HELLO:
            _send_error(conn, hello_frame.session_id, wire.ERR_MALFORMED, "expected hello")
            return
        session_id = hello_frame.session_id
        try:
            hello = wire.parse_hello(hello_frame.payload)
            share_frame = conn.recv_frame()
            if share_frame is None or share_frame.msg_type != wire.MSG_QUERY_SHARE_C1:
                raise ProtocolError("expected the query share after hello")
            k, alpha1, beta1 = wire.parse_query_share_c1(
                share_frame.payload, self.table.bits
            )
        except (wire.FrameError, ProtocolError) as exc:
            _send_error(conn, session_id, wire.ERR_MALFORMED, str(exc))
            return

        session = PrimaryCloudSession(
            self.table,
            share=self.share,
            rng=self.rng,
            allowlist=self.allowlist,
            window=self.window,
        )
        peer_conn = None
        try:
            session.validate_user(hello)
            peer_conn = Conn.connect(self.peer, self.timeout)
            channel = SocketChannel(peer_conn)
            session.run(hello, session_id, k, alpha1, beta1, channel, conn.send_frame)
            log.info("session %s served for %r", session_id.hex()[:8], hello.user_id)
        except QueryRejected as exc:
            _send_error(conn, session_id, exc.code, str(exc))
        except (ProtocolError, wire.FrameError) as exc:
            _send_error(conn, session_id, wire.ERR_INTERNAL, str(exc))
        finally:
            if peer_conn is not None:
                peer_conn.close()


@dataclass
class _SessionEntry:
    session: SecondaryCloudSession
    user_conn: Conn | None = None
    shares_ready: threading.Event = None
    finished: threading.Event = None

    def __post_init__(self):
        self.shares_ready = threading.Event()
        self.finished = threading.Event()


class SecondaryCloudDaemon(_Daemon):
    """Holds the decryption capability: answers the primary cloud's rounds and
    streams result rows to the user.  Never sees the stored table."""

    def __init__(
        self,
        key: SecretKey | KeyShare,
        listen: tuple[str, int],
        *,
        allowlist: set[str] | None = None,
        rng: random.Random | None = None,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        super().__init__(listen, timeout)
        self.key = key
        self.allowlist = allowlist
        self.rng = rng or random.SystemRandom()
        self._sessions: dict[bytes, _SessionEntry] = {}
        self._lock = threading.Lock()

    def _entry(self, session_id: bytes) -> _SessionEntry:
        with self._lock:
            entry = self._sessions.get(session_id)
            if entry is None:
                entry = self._sessions[session_id] = _SessionEntry(
                    SecondaryCloudSession(self.key, rng=self.rng, allowlist=self.allowlist)
                )
            return entry

    def _drop(self, session_id: bytes) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    def handle_connection(self, conn: Conn, peer) -> None:
        while True:
            frame = conn.recv_frame()
            if frame is None:
                return
            if frame.msg_type == wire.MSG_PING:
                info = wire.pack_ping_info(self.key.public_key.bits, 0, 0, 0)
                conn.send_frame(Frame(wire.MSG_PING, frame.session_id, 0, info))
                continue
            break
        if frame.msg_type != wire.MSG_HELLO:
            _send_error(conn, frame.session_id, wire.ERR_MALFORMED, "expected hello")
            return
        hello = wire.parse_hello(frame.payload)
        if hello.role == wire.ROLE_USER:
            self._handle_user(conn, frame)
        else:
            self._handle_primary(conn, frame)

    def _handle_user(self, conn: Conn, hello_frame: Frame) -> None:
        session_id = hello_frame.session_id
        entry = self._entry(session_id)
        entry.user_conn = conn
        outs = entry.session.handle(hello_frame)
        self._route(entry, conn, outs)
        if entry.session.dead:
            entry.finished.set()
            self._drop(session_id)
            return
        share_frame = conn.recv_frame()
        if share_frame is None:
            self._drop(session_id)
            return
        self._route(entry, conn, entry.session.handle(share_frame))
        entry.shares_ready.set()
        # the primary-cloud connection thread writes all result frames;
        # this thread just keeps the user connection open until it finishes
        if not entry.finished.wait(self.timeout):
            _send_error(conn, session_id, wire.ERR_INTERNAL, "session timed out")
        self._drop(session_id)

    def _handle_primary(self, conn: Conn, hello_frame: Frame) -> None:
        session_id = hello_frame.session_id
        entry = self._entry(session_id)
        if not entry.shares_ready.wait(self.timeout):
            _send_error(conn, session_id, wire.ERR_INTERNAL, "no query shares from the user")
            entry.finished.set()
            return
        frame = hello_frame
        try:
            while True:
                self._route(entry, conn, entry.session.handle(frame))
                if entry.session.dead:
                    break
                frame = conn.recv_frame()
                if frame is None:
                    break
        finally:
            if entry.user_conn is not None and not entry.finished.is_set():
                # abnormal teardown: do not leave the user hanging
                _send_error(
                    entry.user_conn, session_id, wire.ERR_INTERNAL, "session aborted"
                )
            entry.finished.set()

    def _route(self, entry: _SessionEntry, c1_conn: Conn, outs) -> None:
        for dest, frame in outs:
            if dest == "c1":
                c1_conn.send_frame(frame)
            elif entry.user_conn is not None:
                entry.user_conn.send_frame(frame)
                if frame.msg_type in (wire.MSG_DONE, wire.MSG_ERROR):
                    entry.finished.set()


# -- user-side client -------------------------------------------------------------


@dataclass
class RemoteQueryResult:
    records: list[list[int]]
    warnings: list[str]
    decrypt_count: int
    table_info: tuple[int, int, int, int]  # (bits, m, n, w)


def ping(address: tuple[str, int], timeout: float = DEFAULT_TIMEOUT) -> tuple[int, int, int, int]:
    """Health-check a daemon; returns its (key bits, m, n, w), zeros where unknown."""
    conn = Conn.connect(address, timeout)
    try:
        conn.send_frame(Frame(wire.MSG_PING, b"\x00" * 16, 0))
        reply = conn.recv_frame()
        if reply is None or reply.msg_type != wire.MSG_PING:
            raise TransportError("no ping reply")
        return wire.parse_ping_info(reply.payload)
    finally:
        conn.close()


def _reader(conn: Conn, origin: str, sink: queue.Queue) -> None:
    try:
        while True:
            frame = conn.recv_frame()
            if frame is None:
                sink.put((origin, None))
                return
            sink.put((origin, frame))
            if frame.msg_type in (wire.MSG_DONE, wire.MSG_ERROR):
                return
    except (TransportError, wire.FrameError) as exc:
        sink.put((origin, exc))


def run_remote_query(
    query: RangeQuery,
    proto: int,
    c1_address: tuple[str, int],
    c2_address: tuple[str, int],
    *,
    user_id: str,
    table_pk: PublicKey,
    user_keys=None,
    rng: random.Random | None = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> RemoteQueryResult:
    """Issue one query against running cloud daemons and recover the records."""
    info = ping(c1_address, timeout)
    bits, m, n_rows, w = info
    if bits != table_pk.bits:
        raise QueryRejected(
            wire.ERR_KEY_MISMATCH,
            f"table key is {bits} bits but the local public key is {table_pk.bits}",
        )
    if not 1 <= query.k <= w:
        raise ValueError(f"attribute index {query.k} outside [1, {w}]")
    if max(query.alpha, query.beta) >= (1 << m):
        raise ValueError(f"query bounds must lie in [0, 2^{m})")

    agent = UserAgent(
        query,
        table_pk,
        proto,
        user_id,
        rng=rng,
        user_keys=user_keys,
        m=m,
        session_id=secrets.token_bytes(16),
    )
    conn2 = Conn.connect(c2_address, timeout)
    conn1 = None
    try:
        for frame in agent.frames_for_c2():
            conn2.send_frame(frame)
        conn1 = Conn.connect(c1_address, timeout)
        for frame in agent.frames_for_c1():
            conn1.send_frame(frame)

        sink: queue.Queue = queue.Queue()
        threads = [
            threading.Thread(target=_reader, args=(conn1, "c1", sink), daemon=True),
            threading.Thread(target=_reader, args=(conn2, "c2", sink), daemon=True),
        ]
        for t in threads:
            t.start()
        while not agent.finished:
            try:
                origin, item = sink.get(timeout=timeout)
            except queue.Empty:
                raise TransportError("timed out waiting for result frames") from None
            if item is None:
                raise TransportError(f"{origin} closed before the session finished")
            if isinstance(item, Exception):
                raise item
            agent.handle(item, origin)
        records = agent.records()
        return RemoteQueryResult(records, agent.warnings, agent.decrypt_count, info)
    finally:
        if conn1 is not None:
            conn1.close()
        conn2.close()
