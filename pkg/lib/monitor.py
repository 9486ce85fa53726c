# lib/monitor.py
"""
Monitor service: accepts target connections, authenticates their packet
streams and feeds the decoded actions to a verifier, one session per
connection. A second socket serves the line-oriented status protocol.
"""
import itertools
import math
import logging
import queue
import socket
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterable, List, Optional, Tuple

from lib.channel import (
    ChannelError, ChannelState, HandshakeError, PacketReader, UntrustedChannelError, new_verifier, send_handshake,
    verify_log,
)
from lib.model import EnclaveModel, load_mac_key
from lib.verifier import AnomalyReport, Classification, Verifier

logger = logging.getLogger(__name__)

END = "END"
_EOF = object()
_TICK = object()
POLL_INTERVAL = 0.25  # seconds between inactivity checks on a silent connection


class MonitorError(Exception):
    pass

class StatusQueryError(MonitorError):
    pass


def format_address(address: Tuple[str, int]) -> str:
    return f"{address[0]}:{address[1]}"


class SessionPipeline:
    """verify_log followed by the verifier, for one channel."""

    def __init__(self, model: EnclaveModel, channel: ChannelState, keep_reading_untrusted: bool = True):
        self.verifier = Verifier(model)
        self.channel = channel
        self.keep_reading_untrusted = keep_reading_untrusted
        self.packets = 0
        self.dummies = 0
        self.discarded = 0

    def feed(self, packet: bytes) -> bool:
        """Processes one packet; False once the session should stop reading."""
        self.packets += 1
        if not self.channel.trusted:
            self.channel.touch()
            self.discarded += 1
            return self.keep_reading_untrusted
        try:
            decoded = verify_log(self.channel, packet)
        except UntrustedChannelError as e:
            self.verifier.mark_channel_untrusted(Classification.PROTOCOL_TAMPER, e.reason)
            return self.keep_reading_untrusted
        if decoded is None:
            self.dummies += 1
            return True
        action, thread_id = decoded
        self.verifier.process_action(thread_id, action)
        return True

    def timeout(self, now: Optional[float] = None) -> bool:
        """Applies the inactivity timeout; False while the last packet is recent enough."""
        if not self.channel.check_timeout(now):
            return False
        self.verifier.mark_channel_untrusted(Classification.TIMEOUT, "no packet within the session timeout")
        return True

    def truncated(self, detail: str) -> None:
        self.channel.mark_untrusted(detail)
        self.verifier.mark_channel_untrusted(Classification.PROTOCOL_TAMPER, detail)

    @property
    def trusted(self) -> bool:
        return self.channel.trusted and self.verifier.trusted

    @property
    def classification(self) -> Optional[Classification]:
        """Class of the first anomaly, or the channel verdict when no thread was affected."""
        if self.verifier.reports:
            return self.verifier.reports[0].classification
        if self.verifier.channel_verdict is not None or self.channel.trusted:
            return self.verifier.channel_verdict
        # the channel turned untrusted and the verifier has not been told yet
        return Classification.TIMEOUT if self.channel.untrusted_reason == "timeout" else Classification.PROTOCOL_TAMPER

    @property
    def reports(self) -> List[AnomalyReport]:
        return list(self.verifier.reports)


def replay_packets(model: EnclaveModel, key: bytes, packets: Iterable[bytes],
                   silent_at_end: bool = False) -> SessionPipeline:
    """Runs a recorded packet stream through a fresh verifier channel, in process."""
    pipeline = SessionPipeline(model, new_verifier(key))
    for packet in packets:
        pipeline.feed(packet)
    if silent_at_end:
        pipeline.timeout(now=math.inf)
    return pipeline


@dataclass
class Session:
    id: int
    peer: str
    pipeline: Optional[SessionPipeline] = None
    state: str = "open"
    started: datetime = field(default_factory=datetime.now)
    ended: Optional[datetime] = None
    error: Optional[str] = None

    @property
    def verdict(self) -> str:
        trusted = self.pipeline.trusted if self.pipeline is not None else self.error is None
        return "trusted" if trusted else "untrusted"

    def summary(self) -> str:
        return f"SESSION {self.id} peer={self.peer} state={self.state} verdict={self.verdict}"

    def status_lines(self, thread_id: Optional[int] = None) -> List[str]:
        if self.pipeline is None:
            return [f"UNTRUSTED protocol-tamper session={self.id} state={self.state} detail=\"{self.error}\""]
        verifier = self.pipeline.verifier
        if thread_id is not None:
            return [verifier.status(thread_id).to_record()]
        snapshot = verifier.snapshot()
        if self.pipeline.trusted:
            head = f"TRUSTED session={self.id} state={self.state} threads={len(snapshot)}"
        else:
            reason = self.pipeline.channel.untrusted_reason or "-"
            cls = self.pipeline.classification
            head = (f"UNTRUSTED {cls.value if cls is not None else '-'} session={self.id} state={self.state} "
                    f"threads={len(snapshot)} channel=\"{reason}\"")
        return [head] + [s.to_record() for s in snapshot]


class MonitorServer:
    def __init__(self, model: EnclaveModel, listen: Tuple[str, int], status_listen: Tuple[str, int],
                 timeout: float = 5.0, queue_capacity: int = 1024, keep_reading_untrusted: bool = True):
        self.model = model
        self.listen = listen
        self.status_listen = status_listen
        self.timeout = timeout
        self.queue_capacity = queue_capacity
        self.keep_reading_untrusted = keep_reading_untrusted
        self.sessions: Dict[int, Session] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._stopping = threading.Event()
        self._sockets: List[socket.socket] = []
        self._threads: List[threading.Thread] = []

    # --- lifecycle ---

    def _bind(self, address: Tuple[str, int]) -> socket.socket:
        try:
            sock = socket.create_server(address, reuse_port=False)
        except OSError as e:
            raise MonitorError(f"Cannot listen on {format_address(address)}: {e}") from e
        sock.settimeout(0.2)
        self._sockets.append(sock)
        return sock

    def start(self) -> "MonitorServer":
        targets = self._bind(self.listen)
        status = self._bind(self.status_listen)
        self.address = targets.getsockname()[:2]
        self.status_address = status.getsockname()[:2]
        for name, sock, handler in (("accept", targets, self._run_session), ("status", status, self._serve_status)):
            t = threading.Thread(target=self._accept_loop, args=(sock, handler), name=f"monitor-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        logger.info(f"Monitor listening on {format_address(self.address)}, "
                    f"status on {format_address(self.status_address)}.")
        return self

    def stop(self) -> None:
        self._stopping.set()
        for t in self._threads:
            t.join(timeout=2.0)
        for sock in self._sockets:
            sock.close()
        logger.info("Monitor stopped.")

    def __enter__(self):
        return self.start()

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.stop()

    def _accept_loop(self, sock: socket.socket, handler) -> None:
        while not self._stopping.is_set():
            try:
                conn, peer = sock.accept()
            except socket.timeout:
                continue
            except OSError as e:
                if not self._stopping.is_set():
                    logger.error(f"Accept failed: {e}")
                return
            threading.Thread(target=handler, args=(conn, peer), daemon=True).start()

    # --- sessions ---

    def _new_session(self, peer: Tuple[str, int]) -> Session:
        with self._lock:
            session = Session(next(self._ids), format_address(peer[:2]))
            self.sessions[session.id] = session
        return session

    def _read_packets(self, conn: socket.socket, packets: "queue.Queue") -> None:
        reader = PacketReader(conn)
        conn.settimeout(min(self.timeout, POLL_INTERVAL))
        try:
            while True:
                try:
                    batch = reader.read_batch()
                except socket.timeout:
                    # silence so far; the consumer owns the deadline
                    packets.put(_TICK)
                    continue
                if not batch:
                    packets.put(_EOF)
                    return
                # blocks when the consumer lags; packets are never dropped
                packets.put(batch)
        except ChannelError as e:
            packets.put(e)
        except OSError:
            packets.put(_EOF)

    def _run_session(self, conn: socket.socket, peer: Tuple[str, int]) -> None:
        session = self._new_session(peer)
        logger.info(f"Session {session.id} opened by {session.peer}.")
        try:
            key = send_handshake(conn)
            session.pipeline = SessionPipeline(self.model, new_verifier(key, self.timeout),
                                               self.keep_reading_untrusted)
            packets: "queue.Queue" = queue.Queue(maxsize=self.queue_capacity)
            reader = threading.Thread(target=self._read_packets, args=(conn, packets), daemon=True,
                                      name=f"session-{session.id}-reader")
            reader.start()
            self._consume(session, packets, conn)
        except HandshakeError as e:
            session.error = "handshake-failed"
            logger.error(f"Session {session.id}: {e}")
        except Exception as e:
            # one broken session must not take the others down
            session.error = str(e)
            logger.exception(f"Session {session.id} failed: {e}")
        finally:
            try: conn.close()
            except OSError: pass
            session.state = "closed"
            session.ended = datetime.now()
            self._log_summary(session)

    def _consume(self, session: Session, packets: "queue.Queue", conn: socket.socket) -> None:
        pipeline = session.pipeline
        while True:
            item = packets.get()
            if item is _EOF:
                return
            if item is _TICK:
                if pipeline.timeout():
                    self._hang_up(conn, packets)
                    return
                continue
            if isinstance(item, ChannelError):
                pipeline.truncated(str(item))
                return
            for packet in item:
                if not pipeline.feed(packet):
                    logger.info(f"Session {session.id} untrusted; closing the connection.")
                    self._hang_up(conn, packets)
                    return

    @staticmethod
    def _hang_up(conn: socket.socket, packets: "queue.Queue") -> None:
        try: conn.shutdown(socket.SHUT_RDWR)
        except OSError: pass
        # the reader ends on the closed socket
        while True:
            item = packets.get()
            if item is _EOF or isinstance(item, ChannelError):
                return

    def _log_summary(self, session: Session) -> None:
        p = session.pipeline
        if p is None:
            logger.info(f"{session.summary()} error={session.error}")
            return
        logger.info(f"{session.summary()} packets={p.packets} dummies={p.dummies} discarded={p.discarded} "
                    f"threads={len(p.verifier.threads)}")
        for report in p.reports:
            logger.info(f"Session {session.id}: {report.to_record()}")

    # --- status protocol ---

    def handle_status(self, line: str) -> List[str]:
        parts = line.split()
        if parts == ["SESSIONS"]:
            with self._lock:
                sessions = list(self.sessions.values())
            return [s.summary() for s in sessions]
        if not parts or parts[0] != "STATUS" or len(parts) not in (2, 3):
            return ["ERR bad-request"]
        try:
            session_id = int(parts[1])
            thread_id = int(parts[2]) if len(parts) == 3 else None
        except ValueError:
            return ["ERR bad-request"]
        with self._lock:
            session = self.sessions.get(session_id)
        if session is None:
            return [f"ERR unknown-session {session_id}"]
        return session.status_lines(thread_id)

    def _serve_status(self, conn: socket.socket, peer: Tuple[str, int]) -> None:
        try:
            conn.settimeout(self.timeout)
            with conn, conn.makefile("rw", encoding="utf-8", newline="\n") as f:
                for line in f:
                    lines = self.handle_status(line.strip())
                    f.write("\n".join(lines + [END]) + "\n")
                    f.flush()
        except (OSError, UnicodeDecodeError) as e:
            logger.debug(f"Status connection from {format_address(peer[:2])} ended: {e}")


def load_model(model_path: str, key_file: str) -> EnclaveModel:
    """Loads a model file, refusing it unless its MAC verifies under the key file."""
    model = EnclaveModel.load(model_path, load_mac_key(key_file))
    logger.info(f"Model '{model_path}' loaded: {len(model.functions)} functions.")
    return model


def serve(model: EnclaveModel, listen: Tuple[str, int], status_listen: Tuple[str, int],
          shutdown: threading.Event, **options) -> MonitorServer:
    """Runs a monitor until shutdown is set."""
    server = MonitorServer(model, listen, status_listen, **options).start()
    try:
        while not shutdown.wait(0.2):
            pass
    finally:
        server.stop()
    return server


# --- Clients ---

def query(address: Tuple[str, int], line: str, timeout: float = 5.0) -> List[str]:
    try:
        with socket.create_connection(address, timeout=timeout) as sock, \
                sock.makefile("rw", encoding="utf-8", newline="\n") as f:
            f.write(line + "\n")
            f.flush()
            lines = []
            for raw in f:
                raw = raw.rstrip("\n")
                if raw == END:
                    return lines
                lines.append(raw)
    except OSError as e:
        raise StatusQueryError(f"Status query to {format_address(address)} failed: {e}") from e
    raise StatusQueryError(f"Status response from {format_address(address)} ended without {END}.")


def query_status(address: Tuple[str, int], session: int, thread: Optional[int] = None,
                 timeout: float = 5.0) -> List[str]:
    line = f"STATUS {session}" if thread is None else f"STATUS {session} {thread}"
    return query(address, line, timeout)


def list_sessions(address: Tuple[str, int], timeout: float = 5.0) -> List[Dict[str, str]]:
    """Parsed SESSIONS response: one dict per session with id, peer, state and verdict."""
    sessions = []
    for line in query(address, "SESSIONS", timeout):
        parts = line.split()
        if not parts or parts[0] != "SESSION":
            continue
        entry = {"id": parts[1]}
        entry.update(p.split("=", 1) for p in parts[2:] if "=" in p)
        sessions.append(entry)
    return sessions
