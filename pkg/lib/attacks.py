# lib/attacks.py
"""
Attack scenarios against the simulated enclave.

Emission-layer injectors model an attacker who already controls the enclave
and changes what it does next; transport-layer shims model a malicious host
that sits between the reporter and the monitor. Neither touches the tracing
itself: report_log always sees what the enclave really did.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from lib.actions import Action, ActionType, action_encode, return_site
from lib.channel import (
    ChannelState, MemoryTransport, Transport, generate_key, mac_compute, new_reporter, xor_bytes,
)
from lib.program import TraceProgram
from lib.target import EcallResult, EnclaveHost, ExecutionContext
from lib.transcript import TranscriptEntry
from lib.verifier import Classification

logger = logging.getLogger(__name__)


class UnknownScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class AttackScenario:
    name: str
    layer: str                      # emission | transport
    expected: Classification
    description: str
    params: Dict[str, int] = field(default_factory=dict)


SCENARIOS: Dict[str, AttackScenario] = {s.name: s for s in (
    AttackScenario("rop-install", "emission", Classification.UNKNOWN_EDGE,
                   "A hijacked return jumps to a gadget the model does not know."),
    AttackScenario("stack-overwrite", "emission", Classification.SHADOW_STACK_VIOLATION,
                   "A return goes to a valid return site that is not the caller's."),
    AttackScenario("backdoor-activation", "emission", Classification.STRUCTURE_MISMATCH,
                   "The saved ocall context is corrupted before the ORET restores it."),
    AttackScenario("wire-tamper", "transport", Classification.PROTOCOL_TAMPER,
                   "One bit of a packet is flipped in transit.", {"packet": 3, "byte": 0, "bit": 0}),
    AttackScenario("wire-drop", "transport", Classification.PROTOCOL_TAMPER,
                   "The host drops a packet before it reaches the monitor.", {"packet": 3}),
    AttackScenario("wire-replay", "transport", Classification.PROTOCOL_TAMPER,
                   "An earlier packet is sent again.", {"packet": 3, "source": 1}),
    AttackScenario("wire-forge", "transport", Classification.PROTOCOL_TAMPER,
                   "A packet is replaced by one sealed with the already evolved reporter key.", {"packet": 3}),
)}


def get_scenario(name: str) -> AttackScenario:
    scenario = SCENARIOS.get(name)
    if scenario is None:
        raise UnknownScenarioError(f"Unknown attack scenario '{name}'. Known: {', '.join(sorted(SCENARIOS))}")
    return scenario


# --- Emission layer ---

class Injector:
    """Perturbs nothing; subclasses override one of the two hooks."""

    def __init__(self, scenario: AttackScenario, program: TraceProgram):
        self.scenario = scenario
        self.program = program
        self.fired = False

    def on_emit(self, ctx: ExecutionContext, action: Action, kind: str) -> Optional[Action]:
        return action

    def wrap(self, transport: Transport) -> Transport:
        return transport

    def bind(self, channel: ChannelState) -> None:
        pass

    def _fire(self, detail: str) -> None:
        self.fired = True
        logger.info(f"Attack '{self.scenario.name}' fired: {detail}")


def _is_nested_return(action: Action, kind: str) -> bool:
    return kind == "ret" and action.value is not None


class RopInstall(Injector):
    """The first non-root return transfers to a gadget inside a function body."""

    def __init__(self, scenario: AttackScenario, program: TraceProgram):
        super().__init__(scenario, program)
        first = min(program.functions.values(), key=lambda f: f.index)
        # function addresses are 0x10-aligned and return sites end in 0x5, so +8 is neither
        self.gadget = scenario.params.get("gadget", first.address + 0x8)

    def on_emit(self, ctx, action, kind):
        if self.fired or not _is_nested_return(action, kind):
            return action
        self._fire(f"return at {action.src:#x} redirected to gadget {self.gadget:#x}")
        return Action(ActionType.E, action.src, self.gadget)


class StackOverwrite(Injector):
    """The first non-root return goes to some other legitimate return site."""

    def __init__(self, scenario: AttackScenario, program: TraceProgram):
        super().__init__(scenario, program)
        self.sites = sorted({return_site(s) for s in program.call_sites()})

    def on_emit(self, ctx, action, kind):
        if self.fired or not _is_nested_return(action, kind):
            return action
        others = [s for s in self.sites if s != action.value]
        if not others:
            return action
        self._fire(f"return at {action.src:#x} sent to {others[0]:#x} instead of {action.value:#x}")
        return Action(ActionType.E, action.src, others[0])


class BackdoorActivation(Injector):
    """Flips a bit of the stored ocall context while the host is in control."""

    def on_emit(self, ctx, action, kind):
        if not self.fired and kind == "ocall-exit" and ctx.ocall_contexts:
            ctx.ocall_contexts[-1] ^= 0x1
            self._fire(f"ocall context of thread {ctx.thread_id} corrupted")
        return action


# --- Transport layer ---

class WireShim:
    """Transport wrapper; packet indexes count from 0 in emission order."""

    def __init__(self, inner: Transport, injector: "TransportInjector"):
        self.inner = inner
        self.injector = injector
        self.index = 0
        self.sent: List[bytes] = []

    def send(self, packet: bytes) -> None:
        i = self.index
        self.index += 1
        for out in self.injector.rewrite(i, packet, self.sent):
            self.inner.send(out)
            self.sent.append(out)


class TransportInjector(Injector):
    def __init__(self, scenario: AttackScenario, program: TraceProgram):
        super().__init__(scenario, program)
        self.channel: Optional[ChannelState] = None
        self.params = dict(scenario.params)

    def wrap(self, transport: Transport) -> Transport:
        return WireShim(transport, self)

    def bind(self, channel: ChannelState) -> None:
        self.channel = channel

    def rewrite(self, index: int, packet: bytes, sent: List[bytes]) -> List[bytes]:
        if self.fired or index != self.params["packet"]:
            return [packet]
        return self.perturb(packet, sent)

    def perturb(self, packet: bytes, sent: List[bytes]) -> List[bytes]:
        raise NotImplementedError


class WireTamper(TransportInjector):
    def perturb(self, packet, sent):
        b, bit = self.params.get("byte", 0), self.params.get("bit", 0)
        data = bytearray(packet)
        data[b] ^= 1 << bit
        self._fire(f"bit {bit} of byte {b} flipped in packet {self.params['packet']}")
        return [bytes(data)]


class WireDrop(TransportInjector):
    def perturb(self, packet, sent):
        self._fire(f"packet {self.params['packet']} dropped")
        return []


class WireReplay(TransportInjector):
    def perturb(self, packet, sent):
        source = self.params.get("source", 0)
        if source >= len(sent):
            return [packet]
        self._fire(f"packet {source} replayed before packet {self.params['packet']}")
        return [sent[source], packet]


class WireForge(TransportInjector):
    def perturb(self, packet, sent):
        # the shim runs inside report_log, after the reporter key has evolved
        key = self.channel.key
        target = self.params.get("target", 0x401008)
        payload = action_encode(Action(ActionType.E, target, target), 1)
        forged = xor_bytes(payload + mac_compute(payload, key), key)
        self._fire(f"packet {self.params['packet']} replaced by a forgery")
        return [forged]


_INJECTORS: Dict[str, Callable[[AttackScenario, TraceProgram], Injector]] = {
    "rop-install": RopInstall,
    "stack-overwrite": StackOverwrite,
    "backdoor-activation": BackdoorActivation,
    "wire-tamper": WireTamper,
    "wire-drop": WireDrop,
    "wire-replay": WireReplay,
    "wire-forge": WireForge,
}


def make_injector(name: str, program: TraceProgram, **params: int) -> Injector:
    base = get_scenario(name)
    scenario = AttackScenario(base.name, base.layer, base.expected, base.description, {**base.params, **params})
    return _INJECTORS[name](scenario, program)


def attach(injector: Injector, transport: Transport, key: bytes, timeout: float = 5.0) -> ChannelState:
    """Builds the reporter channel with the injector's transport shim in place."""
    channel = new_reporter(injector.wrap(transport), key, timeout)
    injector.bind(channel)
    return channel


@dataclass
class AttackRun:
    scenario: AttackScenario
    key: bytes
    packets: List[bytes]
    transcript: List[TranscriptEntry]
    results: Dict[int, List[EcallResult]]
    fired: bool

    @property
    def expected(self) -> Classification:
        return self.scenario.expected


def run_attack(name: str, program: TraceProgram, key: Optional[bytes] = None, threads: int = 1,
               schedule: Optional[List[int]] = None, **params: int) -> AttackRun:
    """Runs the program's workload with one scenario injected, collecting the packets in memory."""
    injector = make_injector(name, program, **params)
    key = key or generate_key()
    sink = MemoryTransport()
    channel = attach(injector, sink, key)
    host = EnclaveHost(program, channel, emit_hook=injector.on_emit)
    results = host.run_workload(threads, schedule)
    if not injector.fired:
        logger.warning(f"Attack '{name}' never found its injection point in '{program.source}'.")
    return AttackRun(injector.scenario, key, sink.packets, host.transcript, results, injector.fired)
