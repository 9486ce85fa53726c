# lib/channel.py
"""
Forward-secure log channel between the simulated enclave (reporter) and the
monitor (verifier).

Every packet is (encoded action | mac) XORed with the current 48-byte key,
and the key is evolved after each packet on both sides. A single lost,
altered or replayed packet therefore desynchronizes the keys and every MAC
from then on fails, which is the signal the monitor relies on.
"""
import hashlib
import hmac
import logging
import secrets
import socket
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Protocol, Tuple

from lib.actions import ACTION_SIZE, Action, MalformedActionError, action_decode, action_encode

logger = logging.getLogger(__name__)

MAC_SIZE = 16
KEY_SIZE = ACTION_SIZE + MAC_SIZE
PACKET_SIZE = KEY_SIZE
HANDSHAKE_VERSION = 0x01
HANDSHAKE_SIZE = 1 + KEY_SIZE

DUMMY_TAG = 0xFF
DUMMY_PAYLOAD = bytes([DUMMY_TAG]) + bytes(ACTION_SIZE - 1)


class ChannelError(Exception):
    pass

class ChannelNotReadyError(ChannelError):
    pass

class HandshakeError(ChannelError):
    def __init__(self, message: str, verifier: Optional["ChannelState"] = None):
        super().__init__(message)
        self.verifier = verifier

class TransportWriteError(ChannelError):
    pass

class UntrustedChannelError(ChannelError):
    def __init__(self, reason: str):
        super().__init__(f"Channel untrusted: {reason}")
        self.reason = reason


# --- Primitives ---

def mac_compute(payload: bytes, key: bytes) -> bytes:
    return hashlib.sha256(payload + key).digest()[:MAC_SIZE]


def key_evolve(key: bytes) -> bytes:
    return hashlib.sha256(key + b"\x00").digest() + hashlib.sha256(key + b"\x01").digest()[:MAC_SIZE]


def xor_bytes(data: bytes, pad: bytes) -> bytes:
    n = len(data)
    return (int.from_bytes(data, "little") ^ int.from_bytes(pad[:n], "little")).to_bytes(n, "little")


def generate_key() -> bytes:
    return secrets.token_bytes(KEY_SIZE)


# --- Transports ---

class Transport(Protocol):
    def send(self, packet: bytes) -> None: ...


class SocketTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send(self, packet: bytes) -> None:
        self.sock.sendall(packet)


class MemoryTransport:
    """Keeps packets in emission order; used by tests and the in-process pipeline."""
    def __init__(self):
        self._packets: List[bytes] = []
        self._lock = threading.Lock()

    def send(self, packet: bytes) -> None:
        with self._lock:
            self._packets.append(packet)

    @property
    def packets(self) -> List[bytes]:
        with self._lock:
            return list(self._packets)

    def drain(self) -> List[bytes]:
        with self._lock:
            out, self._packets = self._packets, []
        return out


# --- Channel state ---

class Role(str, Enum):
    REPORTER = "reporter"
    VERIFIER = "verifier"


class ChannelStatus(str, Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"


@dataclass
class ChannelState:
    role: Role
    key: Optional[bytes] = None
    timeout: float = 5.0
    transport: Optional[Transport] = None
    packets_processed: int = 0
    status: ChannelStatus = ChannelStatus.TRUSTED
    untrusted_reason: Optional[str] = None
    transport_lost: Optional[str] = None   # first write failure; later packets are sealed but not sent
    last_activity: float = field(default_factory=time.monotonic)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def ready(self) -> bool:
        return self.key is not None

    @property
    def trusted(self) -> bool:
        return self.status is ChannelStatus.TRUSTED

    def install_key(self, key: bytes) -> None:
        if len(key) != KEY_SIZE:
            raise HandshakeError(f"Initial key must be {KEY_SIZE} bytes, got {len(key)}.")
        self.key = bytes(key)
        self.touch()

    def touch(self, now: Optional[float] = None) -> None:
        self.last_activity = time.monotonic() if now is None else now

    def check_timeout(self, now: Optional[float] = None) -> bool:
        """True once nothing arrived for longer than the timeout; a trusted channel turns untrusted."""
        now = time.monotonic() if now is None else now
        if now - self.last_activity > self.timeout:
            self.mark_untrusted("timeout")
            return True
        return False

    def mark_untrusted(self, reason: str) -> None:
        if self.status is ChannelStatus.UNTRUSTED:
            return
        self.status = ChannelStatus.UNTRUSTED
        self.untrusted_reason = reason
        logger.warning(f"{self.role.value} channel marked untrusted after {self.packets_processed} packets: {reason}")


def new_reporter(transport: Optional[Transport] = None, key: Optional[bytes] = None, timeout: float = 5.0) -> ChannelState:
    ch = ChannelState(Role.REPORTER, timeout=timeout, transport=transport)
    if key is not None:
        ch.install_key(key)
    return ch


def new_verifier(key: Optional[bytes] = None, timeout: float = 5.0) -> ChannelState:
    ch = ChannelState(Role.VERIFIER, timeout=timeout)
    if key is not None:
        ch.install_key(key)
    return ch


# --- reportLog / verifyLog ---

def _seal(ch: ChannelState, payload: bytes) -> bytes:
    # caller holds ch.lock
    key = ch.key
    packet = xor_bytes(payload + mac_compute(payload, key), key)
    ch.key = key_evolve(key)
    ch.packets_processed += 1
    if ch.transport is not None and ch.transport_lost is None:
        try:
            ch.transport.send(packet)
        except OSError as e:
            ch.transport_lost = str(e)
            raise TransportWriteError(f"Packet {ch.packets_processed} could not be written: {e}") from e
    return packet


def report_log(ch: ChannelState, action: Action, thread_id: int) -> bytes:
    """Encrypts one action, evolves the key and writes the packet.

    The key is evolved even if the write fails: the action counts as emitted.
    Only the first failed write raises; once the transport is lost, packets
    are dropped silently.
    """
    with ch.lock:
        if not ch.ready:
            raise ChannelNotReadyError("report_log called before the handshake completed.")
        return _seal(ch, action_encode(action, thread_id))


def verify_log(ch: ChannelState, packet: bytes) -> Optional[Tuple[Action, int]]:
    """Authenticates one packet.

    Returns (action, thread_id), or None for an authenticated dummy packet.
    Raises UntrustedChannelError on any failure; the status stays untrusted.
    """
    with ch.lock:
        if not ch.ready:
            raise ChannelNotReadyError("verify_log called before the handshake completed.")
        if not ch.trusted:
            raise UntrustedChannelError(ch.untrusted_reason or "untrusted")
        key = ch.key
        ch.key = key_evolve(key)
        ch.packets_processed += 1
        ch.touch()
        if len(packet) != PACKET_SIZE:
            ch.mark_untrusted(f"packet of {len(packet)} bytes")
            raise UntrustedChannelError(ch.untrusted_reason)
        plain = xor_bytes(packet, key)
        payload, mac = plain[:ACTION_SIZE], plain[ACTION_SIZE:]
        if not hmac.compare_digest(mac, mac_compute(payload, key)):
            ch.mark_untrusted(f"mac-mismatch at packet {ch.packets_processed}")
            raise UntrustedChannelError(ch.untrusted_reason)
        if payload == DUMMY_PAYLOAD:
            return None
        try:
            return action_decode(payload)
        except MalformedActionError as e:
            ch.mark_untrusted(f"malformed action at packet {ch.packets_processed}: {e}")
            raise UntrustedChannelError(ch.untrusted_reason) from e


def emit_dummies(ch: ChannelState, k_max: int, t_max: float, rng=None, sleep=time.sleep) -> int:
    """Writes 0..k_max authenticated dummy packets, each after a random delay in [0, t_max]."""
    if k_max <= 0:
        return 0
    rng = rng or secrets.SystemRandom()
    count = rng.randint(0, k_max)
    for _ in range(count):
        if t_max > 0:
            sleep(rng.uniform(0, t_max))
        with ch.lock:
            if not ch.ready:
                raise ChannelNotReadyError("emit_dummies called before the handshake completed.")
            _seal(ch, DUMMY_PAYLOAD)
    return count


# --- Handshake (stub for remote attestation) ---

def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Reads exactly n bytes; returns fewer only if the peer closed the stream."""
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def send_handshake(sock: socket.socket, key: Optional[bytes] = None) -> bytes:
    """Verifier side: generates the initial key and sends it to the reporter."""
    key = key or generate_key()
    if len(key) != KEY_SIZE:
        raise HandshakeError(f"Initial key must be {KEY_SIZE} bytes, got {len(key)}.")
    try:
        sock.sendall(bytes([HANDSHAKE_VERSION]) + key)
    except OSError as e:
        raise HandshakeError(f"Could not send handshake frame: {e}") from e
    return key


def receive_handshake(sock: socket.socket, timeout: float = 5.0) -> bytes:
    """Reporter side: waits for the handshake frame and returns the initial key."""
    try:
        sock.settimeout(timeout)
        frame = recv_exact(sock, HANDSHAKE_SIZE)
    except OSError as e:
        raise HandshakeError(f"Handshake frame not received: {e}") from e
    finally:
        try: sock.settimeout(None)
        except OSError: pass
    if len(frame) != HANDSHAKE_SIZE:
        raise HandshakeError(f"Handshake frame truncated ({len(frame)} of {HANDSHAKE_SIZE} bytes).")
    if frame[0] != HANDSHAKE_VERSION:
        raise HandshakeError(f"Unsupported handshake version 0x{frame[0]:02x}.")
    return frame[1:]


def handshake(reporter_sock: socket.socket, verifier_sock: socket.socket,
              timeout: float = 5.0) -> Tuple[ChannelState, ChannelState]:
    verifier = new_verifier(timeout=timeout)
    try:
        key = send_handshake(verifier_sock)
        reporter_key = receive_handshake(reporter_sock, timeout)
    except HandshakeError as e:
        verifier.mark_untrusted("handshake-failed")
        raise HandshakeError(str(e), verifier=verifier) from e
    verifier.install_key(key)
    reporter = new_reporter(SocketTransport(reporter_sock), reporter_key, timeout)
    logger.info("Handshake complete; channel keys installed on both endpoints.")
    return reporter, verifier


class PacketReader:
    """Reads fixed-size packets from a connected socket, one receive buffer at a time."""
    def __init__(self, sock: socket.socket, chunk_size: int = PACKET_SIZE * 1024):
        self.sock = sock
        self.chunk_size = chunk_size
        self._partial = bytearray()
        self._ready: List[bytes] = []
        self._next = 0

    def read_batch(self) -> List[bytes]:
        """Every whole packet buffered or received next; [] at a clean end of stream.

        Socket timeouts propagate and leave a partial packet buffered for the next call.
        """
        if self._next < len(self._ready):
            batch = self._ready[self._next:]
            self._ready, self._next = [], 0
            return batch
        partial = self._partial
        while True:
            chunk = self.sock.recv(self.chunk_size)
            if not chunk:
                if partial:
                    raise ChannelError(f"Stream ended inside a packet ({len(partial)} of {PACKET_SIZE} bytes).")
                return []
            partial += chunk
            whole = len(partial) - len(partial) % PACKET_SIZE
            if whole:
                data = bytes(partial[:whole])
                del partial[:whole]
                return [data[i:i + PACKET_SIZE] for i in range(0, whole, PACKET_SIZE)]

    def read(self) -> Optional[bytes]:
        """Next packet, or None at a clean end of stream."""
        if self._next >= len(self._ready):
            self._ready, self._next = self.read_batch(), 0
            if not self._ready:
                return None
        packet = self._ready[self._next]
        self._next += 1
        return packet
