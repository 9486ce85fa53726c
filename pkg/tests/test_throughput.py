# tests/test_throughput.py
"""
Sustained verification rate over a loopback connection.

The reporter runs in its own process, as the target does, and the clock
starts once it has connected, so only emission, transport and verification
are timed.
"""
import multiprocessing
import socket
import time
from typing import List, Tuple

import pytest

from lib.actions import Action
from lib.channel import PacketReader, SocketTransport, new_reporter, new_verifier, report_log
from lib.monitor import SessionPipeline
from lib.target import EnclaveHost
from tests.conftest import FIXED_KEY

TOTAL_ACTIONS = 1_000_000
MIN_RATE = 100_000  # actions per second


def produce(address: Tuple[str, int], cycle: List[Action], repeats: int) -> None:
    sock = socket.create_connection(address)
    reporter = new_reporter(SocketTransport(sock), FIXED_KEY)
    for _ in range(repeats):
        for action in cycle:
            report_log(reporter, action, 1)
    sock.shutdown(socket.SHUT_WR)
    sock.close()


@pytest.mark.benchmark
class TestThroughput:
    def test_socket_pipeline_rate(self, corpus, model_of):
        host = EnclaveHost(corpus("attack_target"))
        host.run_workload(1)
        cycle = [e.action for e in host.transcript]
        repeats = -(-TOTAL_ACTIONS // len(cycle))
        pipeline = SessionPipeline(model_of("attack_target"), new_verifier(FIXED_KEY))

        with socket.create_server(("127.0.0.1", 0)) as listener:
            listener.settimeout(30.0)
            reporter = multiprocessing.get_context("spawn").Process(
                target=produce, args=(listener.getsockname()[:2], cycle, repeats), daemon=True)
            reporter.start()
            conn, _ = listener.accept()
        with conn:
            conn.settimeout(30.0)
            reader = PacketReader(conn)
            started = time.perf_counter()
            while True:
                batch = reader.read_batch()
                if not batch:
                    break
                for packet in batch:
                    pipeline.feed(packet)
            elapsed = time.perf_counter() - started
        reporter.join(timeout=30.0)

        assert reporter.exitcode == 0
        assert pipeline.trusted
        assert pipeline.packets == len(cycle) * repeats >= TOTAL_ACTIONS
        rate = pipeline.packets / elapsed
        print(f"\n{pipeline.packets} actions in {elapsed:.2f}s: {rate:,.0f} actions/s")
        assert rate >= MIN_RATE
