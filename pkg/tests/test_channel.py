# tests/test_channel.py
import hashlib
import random
import socket

import pytest

from lib.actions import Action, ActionType, action_encode
from lib.channel import (
    DUMMY_PAYLOAD, KEY_SIZE, MAC_SIZE, PACKET_SIZE, ChannelError, ChannelNotReadyError, HandshakeError,
    MemoryTransport, PacketReader, TransportWriteError, UntrustedChannelError, emit_dummies, handshake,
    key_evolve, mac_compute, new_reporter, new_verifier, report_log, verify_log, xor_bytes,
)


def action(i: int) -> Action:
    return Action(ActionType.B, 0x401000 + 0x10 * (i % 7), i % 2)


def stream(key: bytes, n: int):
    """n packets from a fresh reporter, with the actions they carry."""
    sink = MemoryTransport()
    reporter = new_reporter(sink, key)
    actions = [action(i) for i in range(n)]
    for a in actions:
        report_log(reporter, a, 1)
    return sink.packets, actions


def first_failure(key: bytes, packets) -> int:
    """Index of the packet the verifier rejects, or -1."""
    verifier = new_verifier(key)
    for i, p in enumerate(packets):
        try:
            verify_log(verifier, p)
        except UntrustedChannelError:
            return i
    return -1


class BrokenTransport:
    def send(self, packet: bytes) -> None:
        raise BrokenPipeError("peer gone")


class TestPrimitives:
    def test_mac_known_answer(self):
        """MAC of 32 zero bytes under a 48 zero-byte key is SHA-256 of 80 zero bytes, truncated."""
        assert mac_compute(bytes(32), bytes(48)) == hashlib.sha256(bytes(80)).digest()[:16]

    def test_mac_depends_on_key(self):
        rng = random.Random(5)
        payload = bytes(32)
        macs = {mac_compute(payload, rng.randbytes(KEY_SIZE)) for _ in range(10_000)}
        assert len(macs) == 10_000
        assert all(len(m) == MAC_SIZE for m in macs)

    def test_key_evolution_formula(self):
        k = bytes(range(48))
        expected = hashlib.sha256(k + b"\x00").digest() + hashlib.sha256(k + b"\x01").digest()[:16]
        assert key_evolve(k) == expected
        assert len(key_evolve(k)) == KEY_SIZE

    def test_key_evolution_has_no_fixed_point(self):
        rng = random.Random(9)
        for _ in range(1000):
            k = rng.randbytes(KEY_SIZE)
            assert key_evolve(k) != k

    def test_evolved_key_is_uncorrelated(self):
        """Each bit of the evolved key agrees with the same bit of the old key about half the time."""
        rng = random.Random(13)
        samples = 10_000
        agree = [0] * (KEY_SIZE * 8)
        for _ in range(samples):
            k = rng.randbytes(KEY_SIZE)
            same = ~(int.from_bytes(k, "little") ^ int.from_bytes(key_evolve(k), "little"))
            for bit in range(KEY_SIZE * 8):
                agree[bit] += (same >> bit) & 1
        # 6 sigma around samples/2
        assert all(abs(a - samples / 2) < 300 for a in agree)

    def test_lockstep_evolution(self):
        a = b = bytes(48)
        for _ in range(100_000):
            a, b = key_evolve(a), key_evolve(b)
        assert a == b


class TestReportAndVerify:
    def test_round_trip(self, key):
        sink = MemoryTransport()
        reporter, verifier = new_reporter(sink, key), new_verifier(key)
        a = Action(ActionType.E, 0x401000, 0x402000)
        report_log(reporter, a, 4)
        assert verify_log(verifier, sink.packets[0]) == (a, 4)
        assert reporter.key == verifier.key
        assert reporter.packets_processed == verifier.packets_processed == 1

    def test_identical_actions_differ_on_the_wire(self, key):
        reporter = new_reporter(MemoryTransport(), key)
        a = Action(ActionType.T, 0x1040)
        assert report_log(reporter, a, 1) != report_log(reporter, a, 1)

    def test_first_packet_is_a_one_time_pad(self, key):
        reporter = new_reporter(None, key)
        a = Action(ActionType.N, 0x1000, 0)
        packet = report_log(reporter, a, 1)
        payload = action_encode(a, 1)
        assert len(packet) == PACKET_SIZE
        assert xor_bytes(packet, key) == payload + mac_compute(payload, key)

    def test_not_ready_before_handshake(self):
        with pytest.raises(ChannelNotReadyError):
            report_log(new_reporter(MemoryTransport()), action(0), 1)
        with pytest.raises(ChannelNotReadyError):
            verify_log(new_verifier(), bytes(PACKET_SIZE))

    def test_write_failure_still_evolves(self, key):
        reporter = new_reporter(BrokenTransport(), key)
        with pytest.raises(TransportWriteError):
            report_log(reporter, action(0), 1)
        assert reporter.key == key_evolve(key)

    def test_lost_transport_drops_later_packets(self, key):
        reporter = new_reporter(BrokenTransport(), key)
        with pytest.raises(TransportWriteError):
            report_log(reporter, action(0), 1)
        assert reporter.transport_lost == "peer gone"
        report_log(reporter, action(1), 1)
        assert reporter.key == key_evolve(key_evolve(key))
        assert reporter.packets_processed == 2

    def test_wrong_size_packet(self, key):
        verifier = new_verifier(key)
        with pytest.raises(UntrustedChannelError):
            verify_log(verifier, bytes(PACKET_SIZE - 1))
        assert not verifier.trusted


class TestTamperProperties:
    def test_any_single_bit_flip(self, key):
        packets, _ = stream(key, 1000)
        rng = random.Random(1)
        for _ in range(40):
            i = rng.randrange(len(packets))
            bit = rng.randrange(PACKET_SIZE * 8)
            tampered = list(packets)
            data = bytearray(tampered[i])
            data[bit // 8] ^= 1 << (bit % 8)
            tampered[i] = bytes(data)
            assert first_failure(key, tampered) == i

    def test_replay_of_an_earlier_packet(self, key):
        packets, _ = stream(key, 200)
        rng = random.Random(2)
        for _ in range(20):
            at = rng.randrange(1, len(packets))
            replayed = packets[:at] + [packets[rng.randrange(at)]] + packets[at:]
            assert first_failure(key, replayed) == at

    def test_dropped_packet(self, key):
        packets, _ = stream(key, 10)
        assert first_failure(key, packets[:4] + packets[5:]) == 4

    def test_forgery_with_the_evolved_key(self, key):
        """The key after packet 0 is useless for forging packet 0."""
        reporter = new_reporter(None, key)
        report_log(reporter, action(0), 1)
        evolved = reporter.key
        rng = random.Random(3)
        successes = 0
        for _ in range(10_000):
            payload = action_encode(Action(ActionType.E, rng.randrange(1 << 32), rng.randrange(1 << 32)), 1)
            forged = xor_bytes(payload + mac_compute(payload, evolved), evolved)
            plain = xor_bytes(forged, key)
            if mac_compute(plain[:32], key) == plain[32:]:
                successes += 1
        assert successes == 0

    def test_untrusted_is_absorbing(self, key):
        packets, _ = stream(key, 3)
        verifier = new_verifier(key)
        with pytest.raises(UntrustedChannelError):
            verify_log(verifier, packets[1])
        with pytest.raises(UntrustedChannelError):
            verify_log(verifier, packets[0])
        assert not verifier.trusted
        verifier.touch()
        assert not verifier.trusted


class TestDummies:
    def test_zero_maximum(self, key):
        sink = MemoryTransport()
        assert emit_dummies(new_reporter(sink, key), 0, 0.0) == 0
        assert sink.packets == []

    def test_dummies_are_authenticated_and_dropped(self, key):
        sink = MemoryTransport()
        reporter = new_reporter(sink, key)
        sent = []
        rng = random.Random(4)
        for i in range(50):
            a = action(i)
            report_log(reporter, a, 1)
            sent.append(a)
            emit_dummies(reporter, 3, 0.0, rng=rng)
        assert len(sink.packets) > 50
        assert all(len(p) == PACKET_SIZE for p in sink.packets)
        verifier = new_verifier(key)
        accepted = [verify_log(verifier, p) for p in sink.packets]
        assert [a for a, _ in filter(None, accepted)] == sent
        assert verifier.trusted

    def test_delay_is_bounded(self, key):
        delays = []
        emit_dummies(new_reporter(MemoryTransport(), key), 5, 0.5, rng=random.Random(6), sleep=delays.append)
        assert all(0 <= d <= 0.5 for d in delays)

    def test_dummy_payload_shape(self):
        assert DUMMY_PAYLOAD[0] == 0xFF and not any(DUMMY_PAYLOAD[1:])


class TestTimeout:
    def test_silence_makes_the_channel_untrusted(self, key):
        verifier = new_verifier(key, timeout=5.0)
        verifier.touch(100.0)
        assert not verifier.check_timeout(104.0)
        assert verifier.check_timeout(105.5)
        assert verifier.untrusted_reason == "timeout"

    def test_silence_after_tampering_keeps_the_first_reason(self, key):
        verifier = new_verifier(key, timeout=5.0)
        verifier.mark_untrusted("mac-mismatch at packet 1")
        verifier.touch(100.0)
        assert verifier.check_timeout(106.0)
        assert verifier.untrusted_reason == "mac-mismatch at packet 1"


class TestHandshake:
    def test_shared_key(self, socket_pair):
        rep_sock, ver_sock = socket_pair
        reporter, verifier = handshake(rep_sock, ver_sock)
        assert reporter.key == verifier.key
        assert reporter.ready and verifier.ready

    def test_stream_after_handshake(self, socket_pair):
        rep_sock, ver_sock = socket_pair
        reporter, verifier = handshake(rep_sock, ver_sock)
        a = Action(ActionType.N, 0x1000, 0)
        report_log(reporter, a, 2)
        assert verify_log(verifier, PacketReader(ver_sock).read()) == (a, 2)

    def test_broken_transport(self, socket_pair):
        rep_sock, ver_sock = socket_pair
        rep_sock.close()
        with pytest.raises(HandshakeError) as info:
            handshake(rep_sock, ver_sock)
        assert info.value.verifier is not None
        assert not info.value.verifier.trusted
        assert info.value.verifier.untrusted_reason == "handshake-failed"


class TestPacketReader:
    def test_clean_end(self, socket_pair):
        a, b = socket_pair
        a.sendall(bytes(PACKET_SIZE))
        a.shutdown(socket.SHUT_WR)
        reader = PacketReader(b)
        assert reader.read() == bytes(PACKET_SIZE)
        assert reader.read() is None

    def test_truncated_packet(self, socket_pair):
        a, b = socket_pair
        a.sendall(bytes(PACKET_SIZE + 5))
        a.shutdown(socket.SHUT_WR)
        reader = PacketReader(b)
        reader.read()
        with pytest.raises(ChannelError):
            reader.read()

    def test_batch_holds_every_whole_packet(self, socket_pair):
        a, b = socket_pair
        a.sendall(bytes(range(PACKET_SIZE)) * 3)
        a.shutdown(socket.SHUT_WR)
        reader = PacketReader(b)
        batch = []
        while len(batch) < 3:
            batch += reader.read_batch()
        assert batch == [bytes(range(PACKET_SIZE))] * 3
        assert reader.read_batch() == []

    def test_partial_packet_survives_a_timeout(self, socket_pair):
        a, b = socket_pair
        b.settimeout(0.1)
        reader = PacketReader(b)
        packet = bytes(range(PACKET_SIZE))
        a.sendall(packet[:20])
        with pytest.raises(socket.timeout):
            reader.read()
        a.sendall(packet[20:])
        assert reader.read() == packet

    def test_read_and_read_batch_share_the_buffer(self, socket_pair):
        a, b = socket_pair
        packets = [bytes([i]) * PACKET_SIZE for i in range(4)]
        a.sendall(b"".join(packets))
        a.shutdown(socket.SHUT_WR)
        reader = PacketReader(b, chunk_size=PACKET_SIZE * 4)
        first = reader.read()
        rest = []
        while len(rest) < 3:
            rest += reader.read_batch()
        assert [first] + rest == packets
        assert reader.read() is None
