# tests/conftest.py
import os
import socket
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from lib.channel import MemoryTransport, new_reporter  # noqa: E402
from lib.extractor import extract_model  # noqa: E402
from lib.monitor import replay_packets  # noqa: E402
from lib.program import load_program  # noqa: E402
from lib.target import EnclaveHost  # noqa: E402

CORPUS_DIR = os.path.join(ROOT, "corpus")
CORPUS = sorted(f[:-3] for f in os.listdir(CORPUS_DIR) if f.endswith(".ir"))
BENIGN_CORPUS = [name for name in CORPUS if name != "attack_target"]

FIXED_KEY = bytes(range(48))
MODEL_KEY = b"model-key-for-tests"

_models = {}


@pytest.fixture
def corpus():
    """Loads a corpus program by name."""
    def load(name: str):
        return load_program(os.path.join(CORPUS_DIR, f"{name}.ir"))
    return load


@pytest.fixture
def model_of(corpus):
    """Extracted model of a corpus program, cached for the whole run."""
    def extract(name: str):
        if name not in _models:
            _models[name] = extract_model(corpus(name))
        return _models[name]
    return extract


@pytest.fixture
def key():
    return FIXED_KEY


@pytest.fixture
def socket_pair():
    a, b = socket.socketpair()
    yield a, b
    for s in (a, b):
        try: s.close()
        except OSError: pass


@pytest.fixture
def free_address():
    """A loopback address nobody listens on (at the time of the call)."""
    def pick() -> str:
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            return f"127.0.0.1:{s.getsockname()[1]}"
    return pick


@pytest.fixture
def run_pipeline():
    """Runs a program's workload through a reporter channel and replays the packets into a verifier."""
    def run(program, model, threads=1, schedule=None, **host_options):
        sink = MemoryTransport()
        host = EnclaveHost(program, new_reporter(sink, FIXED_KEY), **host_options)
        results = host.run_workload(threads, schedule)
        pipeline = replay_packets(model, FIXED_KEY, sink.packets)
        return host, results, pipeline
    return run
