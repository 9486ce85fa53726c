# tests/test_monitor.py
import math
import socket
import time
from typing import Tuple

import pytest

from lib.actions import SDK_ENTER_SRC, Action, ActionType
from lib.attacks import attach, make_injector
from lib.channel import MemoryTransport, SocketTransport, new_reporter, new_verifier, receive_handshake, report_log
from lib.model import ModelIntegrityError
from lib.monitor import (
    MonitorServer, Session, SessionPipeline, StatusQueryError, list_sessions, load_model, query, query_status,
    replay_packets,
)
from lib.target import EnclaveHost
from lib.verifier import Classification
from tests.conftest import FIXED_KEY

LOOPBACK = ("127.0.0.1", 0)


def start(model, **options) -> MonitorServer:
    return MonitorServer(model, LOOPBACK, LOOPBACK, **options).start()


def run_target(server: MonitorServer, program, threads: int = 1, injector=None) -> Tuple[EnclaveHost, dict]:
    """Connects, runs the workload over the socket and closes the write side; returns (host, results)."""
    sock = socket.create_connection(server.address, timeout=5.0)
    try:
        key = receive_handshake(sock, 5.0)
        transport = SocketTransport(sock)
        channel = attach(injector, transport, key) if injector else new_reporter(transport, key)
        host = EnclaveHost(program, channel, emit_hook=injector.on_emit if injector else None)
        results = host.run_workload(threads)
        try:
            sock.shutdown(socket.SHUT_WR)
        except OSError:
            # the monitor may close an untrusted session early
            pass
        return host, results
    finally:
        sock.close()


def wait_closed(server: MonitorServer, session_id: int = 1, wait: float = 10.0):
    deadline = time.monotonic() + wait
    while time.monotonic() < deadline:
        session = server.sessions.get(session_id)
        if session is not None and session.state == "closed":
            return session
        time.sleep(0.02)
    raise AssertionError(f"session {session_id} never closed")


class TestSessions:
    def test_benign_session_is_trusted(self, corpus, model_of):
        with start(model_of("attack_target")) as server:
            host, _ = run_target(server, corpus("attack_target"))
            session = wait_closed(server)
            assert session.verdict == "trusted"
            assert session.pipeline.packets == len(host.transcript)
            lines = query_status(server.status_address, 1)
        assert lines[0] == "TRUSTED session=1 state=closed threads=1"
        assert lines[1].startswith("TRUSTED thread=1 ")

    def test_concurrent_threads_in_one_session(self, corpus, model_of):
        with start(model_of("nested_ocalls")) as server:
            run_target(server, corpus("nested_ocalls"), threads=3)
            session = wait_closed(server)
            lines = query_status(server.status_address, 1)
        assert session.verdict == "trusted"
        assert lines[0].endswith("threads=3")

    def test_sessions_are_independent(self, corpus, model_of):
        with start(model_of("attack_target")) as server:
            run_target(server, corpus("attack_target"), injector=make_injector("rop-install", corpus("attack_target")))
            wait_closed(server, 1)
            run_target(server, corpus("attack_target"))
            wait_closed(server, 2)
            sessions = list_sessions(server.status_address)
        assert [(s["id"], s["verdict"]) for s in sessions] == [("1", "untrusted"), ("2", "trusted")]

    def test_attack_over_a_socket(self, corpus, model_of):
        program = corpus("attack_target")
        with start(model_of("attack_target")) as server:
            run_target(server, program, injector=make_injector("rop-install", program))
            wait_closed(server)
            lines = query_status(server.status_address, 1)
            thread_line = query_status(server.status_address, 1, 1)
        assert lines[0].startswith("UNTRUSTED unknown-edge session=1 state=closed")
        assert "src=0x401010" in lines[1]
        assert "value=0x401008" in lines[1]
        assert thread_line == [lines[1]]

    def test_untrusted_stream_keeps_being_read(self, corpus, model_of):
        program = corpus("attack_target")
        with start(model_of("attack_target")) as server:
            host, _ = run_target(server, program, injector=make_injector("wire-tamper", program))
            session = wait_closed(server)
        assert session.pipeline.discarded == len(host.transcript) - 4
        assert session.pipeline.classification.value == "protocol-tamper"

    @pytest.mark.parametrize("threads", [1, 4, 8])
    def test_untrusted_stream_can_be_cut(self, corpus, model_of, threads):
        program = corpus("attack_target")
        with start(model_of("attack_target"), keep_reading_untrusted=False) as server:
            host, results = run_target(server, program, threads, injector=make_injector("wire-tamper", program))
            session = wait_closed(server)
        # the target finishes its workload whether or not its writes hit the closed connection
        assert all(r.ok for runs in results.values() for r in runs)
        assert len(results) == threads
        assert host.channel.packets_processed == len(host.transcript)
        assert session.verdict == "untrusted"
        assert session.pipeline.classification.value == "protocol-tamper"
        assert session.pipeline.discarded == 0

    def test_silent_target_times_out(self, model_of):
        with start(model_of("attack_target"), timeout=0.3) as server:
            sock = socket.create_connection(server.address, timeout=5.0)
            try:
                key = receive_handshake(sock, 5.0)
                report_log(new_reporter(SocketTransport(sock), key), Action(ActionType.N, SDK_ENTER_SRC, 0), 1)
                session = wait_closed(server, wait=5.0)
            finally:
                sock.close()
            lines = query_status(server.status_address, 1)
        assert session.pipeline.classification.value == "timeout"
        assert lines[0].startswith("UNTRUSTED timeout session=1")

    def test_stream_ending_inside_a_packet(self, model_of):
        with start(model_of("attack_target")) as server:
            with socket.create_connection(server.address, timeout=5.0) as sock:
                receive_handshake(sock, 5.0)
                sock.sendall(b"\x00" * 20)
                sock.shutdown(socket.SHUT_WR)
                session = wait_closed(server)
        assert session.pipeline.classification.value == "protocol-tamper"
        assert "20 of 48" in session.pipeline.channel.untrusted_reason


class TestStatusProtocol:
    def test_malformed_requests(self, model_of):
        with start(model_of("attack_target")) as server:
            assert query(server.status_address, "HELLO") == ["ERR bad-request"]
            assert query(server.status_address, "STATUS one") == ["ERR bad-request"]
            assert query(server.status_address, "STATUS 1 2 3") == ["ERR bad-request"]
            assert query(server.status_address, "STATUS 9") == ["ERR unknown-session 9"]
            assert query(server.status_address, "SESSIONS") == []

    def test_unseen_thread(self, corpus, model_of):
        with start(model_of("attack_target")) as server:
            run_target(server, corpus("attack_target"))
            wait_closed(server)
            assert query_status(server.status_address, 1, 7) == ["UNSEEN thread=7"]

    def test_handle_status_directly(self, model_of):
        server = MonitorServer(model_of("attack_target"), LOOPBACK, LOOPBACK)
        assert server.handle_status("") == ["ERR bad-request"]
        assert server.handle_status("STATUS 4") == ["ERR unknown-session 4"]

    def test_query_without_a_monitor(self, free_address):
        host, port = free_address().split(":")
        with pytest.raises(StatusQueryError):
            query((host, int(port)), "SESSIONS", timeout=1.0)


class TestModelLoading:
    def test_sealed_model(self, tmp_path, model_of):
        key_file = tmp_path / "monitor.key"
        key_file.write_text(FIXED_KEY.hex() + "\n")
        path = str(tmp_path / "model.txt")
        model_of("attack_target").save(path, FIXED_KEY)
        assert sorted(load_model(path, str(key_file)).functions) == sorted(model_of("attack_target").functions)

    def test_tampered_model_is_refused(self, tmp_path, model_of):
        key_file = tmp_path / "monitor.key"
        key_file.write_text(FIXED_KEY.hex() + "\n")
        path = tmp_path / "model.txt"
        model_of("attack_target").save(str(path), FIXED_KEY)
        original = path.read_text()
        tampered = original.replace(" E 0x401010 -", " E 0x401008 -", 1)
        assert tampered != original
        path.write_text(tampered)
        with pytest.raises(ModelIntegrityError):
            load_model(str(path), str(key_file))

    def test_other_key_is_refused(self, tmp_path, model_of):
        key_file = tmp_path / "monitor.key"
        key_file.write_text("ab" * 16)
        path = str(tmp_path / "model.txt")
        model_of("attack_target").save(path, FIXED_KEY)
        with pytest.raises(ModelIntegrityError):
            load_model(path, str(key_file))


class TestReplay:
    def _packets(self, program):
        sink = MemoryTransport()
        EnclaveHost(program, new_reporter(sink, FIXED_KEY)).run_workload(1)
        return sink.packets

    def test_replayed_stream(self, corpus, model_of):
        pipeline = replay_packets(model_of("attack_target"), FIXED_KEY, self._packets(corpus("attack_target")))
        assert pipeline.trusted
        assert pipeline.classification is None

    def test_silence_at_the_end(self, corpus, model_of):
        pipeline = replay_packets(model_of("attack_target"), FIXED_KEY, self._packets(corpus("attack_target")),
                                  silent_at_end=True)
        assert not pipeline.trusted
        assert pipeline.classification.value == "timeout"
        assert pipeline.channel.untrusted_reason == "timeout"

    def test_wrong_key(self, corpus, model_of):
        pipeline = replay_packets(model_of("attack_target"), bytes(48), self._packets(corpus("attack_target")))
        assert pipeline.channel.untrusted_reason == "mac-mismatch at packet 1"
        assert pipeline.classification.value == "protocol-tamper"


class TestSessionPipeline:
    def pipeline(self, model_of, timeout: float = 5.0) -> SessionPipeline:
        return SessionPipeline(model_of("attack_target"), new_verifier(FIXED_KEY, timeout))

    def test_inactivity_deadline(self, model_of):
        pipeline = self.pipeline(model_of)
        last = pipeline.channel.last_activity
        assert not pipeline.timeout(now=last + 4.0)
        assert pipeline.trusted
        assert pipeline.timeout(now=last + 5.5)
        assert pipeline.classification is Classification.TIMEOUT
        assert pipeline.channel.untrusted_reason == "timeout"

    def test_packets_move_the_deadline(self, corpus, model_of):
        sink = MemoryTransport()
        EnclaveHost(corpus("attack_target"), new_reporter(sink, FIXED_KEY)).run_workload(1)
        pipeline = self.pipeline(model_of)
        pipeline.channel.touch(0.0)
        pipeline.feed(sink.packets[0])
        assert pipeline.channel.last_activity > 0.0
        assert not pipeline.timeout(now=pipeline.channel.last_activity + 1.0)

    def test_discarded_packets_also_count_as_activity(self, model_of):
        pipeline = self.pipeline(model_of)
        pipeline.feed(bytes(48))
        assert pipeline.classification is Classification.PROTOCOL_TAMPER
        pipeline.channel.touch(0.0)
        pipeline.feed(bytes(48))
        assert pipeline.discarded == 1
        assert pipeline.channel.last_activity > 0.0

    def test_timeout_after_tampering_keeps_the_tamper_verdict(self, model_of):
        pipeline = self.pipeline(model_of)
        pipeline.feed(bytes(48))
        assert pipeline.timeout(now=math.inf)
        assert pipeline.verifier.channel_verdict is Classification.PROTOCOL_TAMPER


class TestSessionStatus:
    def session(self, model_of) -> Session:
        pipeline = SessionPipeline(model_of("attack_target"), new_verifier(FIXED_KEY))
        return Session(1, "127.0.0.1:5000", pipeline)

    def test_channel_failure_before_the_verifier_is_told(self, model_of):
        session = self.session(model_of)
        session.pipeline.channel.mark_untrusted("mac-mismatch at packet 3")
        head = session.status_lines()[0]
        assert head.startswith("UNTRUSTED protocol-tamper session=1 state=open threads=0")
        assert 'channel="mac-mismatch at packet 3"' in head

    def test_silent_channel_before_the_verifier_is_told(self, model_of):
        session = self.session(model_of)
        session.pipeline.channel.mark_untrusted("timeout")
        assert session.status_lines()[0].startswith("UNTRUSTED timeout session=1")

    def test_trusted_session(self, model_of):
        assert self.session(model_of).status_lines() == ["TRUSTED session=1 state=open threads=0"]
