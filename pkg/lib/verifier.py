# lib/verifier.py
"""
Model verifier: consumes authenticated actions thread by thread.

Forward edges are checked against the graphs of actions, returns against a
shadow stack, and stop actions drive the enclave life-cycle machine. The
first divergence turns the thread untrusted and freezes a provenance report.
"""
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

from lib.actions import (
    DISPATCH_K_SRC, EXCEPTION_INDEX, ORET_INDEX,
    STOP_TYPES, Action, ActionType, StateTriplet, Transaction, Usage, return_site, state_apply,
)
from lib.model import DISPATCHER_NAME, ActionPattern, EnclaveModel

logger = logging.getLogger(__name__)

Cursor = Optional[FrozenSet[ActionPattern]]


class Position(str, Enum):
    OUTSIDE = "outside"
    IN_ECALL = "in-ecall"
    OCALL_GENERATED = "ocall-generated"
    IN_OCALL_OUT = "in-ocall-out"
    ORET_ENTERED = "oret-entered"
    EXCEPTION_ENTERED = "exception-entered"
    IN_EXCEPTION_TH = "in-exception-TH"
    EXCEPTION_OUT = "exception-out"
    IN_EXCEPTION_IH = "in-exception-IH"
    EXCEPTION_DISPATCHING = "exception-dispatching"
    UNTRUSTED = "untrusted"

    @property
    def coarse(self) -> str:
        return _COARSE.get(self, self.value)


_COARSE = {
    Position.OCALL_GENERATED: Position.IN_OCALL_OUT.value,
    Position.ORET_ENTERED: Position.IN_OCALL_OUT.value,
    Position.EXCEPTION_ENTERED: Position.IN_EXCEPTION_TH.value,
    Position.EXCEPTION_OUT: Position.IN_EXCEPTION_TH.value,
    Position.EXCEPTION_DISPATCHING: Position.IN_EXCEPTION_IH.value,
}

# positions in which generic actions may arrive
_GENERIC_POSITIONS = frozenset({Position.IN_ECALL, Position.EXCEPTION_DISPATCHING})


class Classification(str, Enum):
    UNKNOWN_EDGE = "unknown-edge"
    SHADOW_STACK_VIOLATION = "shadow-stack-violation"
    INVALID_STATE_TRANSITION = "invalid-state-transition"
    STRUCTURE_MISMATCH = "structure-mismatch"
    PROTOCOL_TAMPER = "protocol-tamper"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class ShadowEntry:
    return_site: Optional[int]        # None for the secure-function root
    function: Optional[str]
    cursor: Cursor


@dataclass(frozen=True)
class SavedContext:
    """What a nested ECALL or an exception suspends, restored by its ERET / CONT."""
    kind: str                         # "ecall" or "exception"
    position: Position
    function: Optional[str]
    cursor: Cursor
    shadow: Tuple[ShadowEntry, ...]
    usage: Usage


@dataclass(frozen=True)
class AnomalyReport:
    thread_id: int
    action: Optional[Action]
    classification: Classification
    expected: FrozenSet[ActionPattern]
    state: StateTriplet
    position: Position
    function: Optional[str]
    cursor: Tuple[str, ...]
    detail: str = ""

    def to_record(self) -> str:
        """One-line structured form, for logs and the status protocol."""
        a = self.action
        src = "-" if a is None or a.src is None else f"{a.src:#x}"
        if a is None or a.value is None:
            value = "-"
        elif a.atype in (ActionType.N, ActionType.B):
            value = str(a.value)
        else:
            value = f"{a.value:#x}"
        expected = ",".join(str(p) for p in sorted(self.expected, key=ActionPattern.sort_key))
        where = f"{self.function or '-'}:{'|'.join(self.cursor) or 'entry'}"
        tag = "-" if a is None else a.atype.letter
        record = (f"UNTRUSTED {self.classification.value} thread={self.thread_id} action={tag} src={src} "
                  f"value={value} expected={{{expected}}} state={self.state} position={where} "
                  f"fsm={self.position.value}")
        if self.detail:
            record += f' detail="{self.detail}"'
        return record


@dataclass
class ThreadVerifierState:
    thread_id: int
    state: StateTriplet = field(default_factory=StateTriplet)
    structures: List[int] = field(default_factory=list)
    shadow: List[ShadowEntry] = field(default_factory=list)
    contexts: List[SavedContext] = field(default_factory=list)
    function: Optional[str] = None
    cursor: Cursor = None
    pending: List[Action] = field(default_factory=list)
    position: Position = Position.OUTSIDE
    report: Optional[AnomalyReport] = None
    actions: int = 0
    transactions: int = 0

    @property
    def trusted(self) -> bool:
        return self.report is None


@dataclass(frozen=True)
class ThreadStatus:
    thread_id: int
    verdict: str                      # trusted | untrusted | unseen
    state: StateTriplet
    position: str
    report: Optional[AnomalyReport] = None

    def to_record(self) -> str:
        if self.report is not None:
            return self.report.to_record()
        if self.verdict == "unseen":
            return f"UNSEEN thread={self.thread_id}"
        return f"TRUSTED thread={self.thread_id} state={self.state} fsm={self.position}"


class Verifier:
    def __init__(self, model: EnclaveModel):
        self.model = model
        self.threads: Dict[int, ThreadVerifierState] = {}
        self.channel_verdict: Optional[Classification] = None
        self.reports: List[AnomalyReport] = []
        self._edge_kinds: Dict[FrozenSet[ActionPattern], Tuple[bool, bool]] = {}
        self._lock = threading.RLock()

    def thread(self, thread_id: int) -> ThreadVerifierState:
        vs = self.threads.get(thread_id)
        if vs is None:
            vs = self.threads[thread_id] = ThreadVerifierState(thread_id)
        return vs

    # --- entry point ---

    def process_action(self, thread_id: int, action: Action) -> Optional[AnomalyReport]:
        """None when accepted; otherwise the thread's (possibly earlier) report."""
        with self._lock:
            vs = self.thread(thread_id)
            if vs.report is not None:
                return vs.report
            vs.actions += 1
            if action.atype not in STOP_TYPES:
                return self._generic(vs, action)
            # pending holds generic actions only
            vs.pending.clear()
            return self._advance(vs, action)

    # --- reports ---

    def _expected(self, vs: ThreadVerifierState) -> FrozenSet[ActionPattern]:
        fm = self.model.functions.get(vs.function) if vs.function else None
        return fm.graph.next_patterns(vs.cursor) if fm is not None else frozenset()

    def _fail(self, vs: ThreadVerifierState, action: Optional[Action], cls: Classification,
              detail: str = "") -> AnomalyReport:
        cursor = tuple(sorted(str(p) for p in vs.cursor)) if vs.cursor else ()
        report = AnomalyReport(vs.thread_id, action, cls, self._expected(vs), vs.state,
                               vs.position, vs.function, cursor, detail)
        vs.report = report
        self.reports.append(report)
        vs.position = Position.UNTRUSTED
        logger.warning(report.to_record())
        return report

    def mark_channel_untrusted(self, classification: Classification, detail: str = "") -> None:
        """Channel-level failure: every live thread seen so far becomes untrusted.

        The first channel verdict stands; later ones are ignored.
        """
        with self._lock:
            if self.channel_verdict is not None:
                return
            self.channel_verdict = classification
            for vs in self.threads.values():
                if vs.report is None:
                    self._fail(vs, None, classification, detail)

    # --- generic actions ---

    def _generic(self, vs: ThreadVerifierState, a: Action) -> Optional[AnomalyReport]:
        if vs.position not in _GENERIC_POSITIONS:
            return self._fail(vs, a, Classification.INVALID_STATE_TRANSITION,
                              f"generic action in position {vs.position.value}")
        if vs.function is None:
            return self._fail(vs, a, Classification.UNKNOWN_EDGE, "action after the secure function returned")
        graph = self.model.functions[vs.function].graph
        matched = graph.match(vs.cursor, a)
        if not matched:
            return self._fail(vs, a, Classification.UNKNOWN_EDGE)
        vs.pending.append(a)
        if a.atype is ActionType.E:
            is_call, is_return = self._edge_kind(matched)
            if is_call:
                vs.shadow.append(ShadowEntry(return_site(a.src), vs.function, matched))
                vs.function = self.model.function_at(a.value)
                vs.cursor = None
                return None
            if is_return:
                return self._return(vs, a)
        vs.cursor = matched
        return None

    def _edge_kind(self, matched: FrozenSet[ActionPattern]) -> Tuple[bool, bool]:
        """(call, return) flags of a matched E set."""
        kind = self._edge_kinds.get(matched)
        if kind is None:
            kind = (any(self.model.is_call_pattern(p) for p in matched),
                    any(p.condition is None for p in matched))
            self._edge_kinds[matched] = kind
        return kind

    def _return(self, vs: ThreadVerifierState, a: Action) -> Optional[AnomalyReport]:
        if a.value not in self.model.return_sites:
            return self._fail(vs, a, Classification.UNKNOWN_EDGE, "return to an address that is no return site")
        if not vs.shadow or vs.shadow[-1].return_site != a.value:
            top = vs.shadow[-1].return_site if vs.shadow else None
            shown = "-" if top is None else f"{top:#x}"
            return self._fail(vs, a, Classification.SHADOW_STACK_VIOLATION, f"shadow stack expects {shown}")
        entry = vs.shadow.pop()
        vs.function, vs.cursor = entry.function, entry.cursor
        return None

    # --- stop actions ---

    def fsm_advance(self, vs: ThreadVerifierState, txn: Transaction) -> Optional[AnomalyReport]:
        return self._advance(vs, txn.terminator)

    def _advance(self, vs: ThreadVerifierState, a: Action) -> Optional[AnomalyReport]:
        handler = _TRANSITIONS.get((vs.position, a.atype))
        if handler is None:
            return self._fail(vs, a, Classification.INVALID_STATE_TRANSITION,
                              f"{a.atype.letter} not admissible in {vs.position.value}")
        report = handler(self, vs, a)
        if report is not None:
            return report
        vs.state = self._triplet(vs, a)
        vs.transactions += 1
        return None

    def _triplet(self, vs: ThreadVerifierState, a: Action) -> StateTriplet:
        t = state_apply(vs.state, a)
        # nested structures keep the outer hash visible
        if vs.structures and t.structure != vs.structures[-1]:
            t = StateTriplet(t.usage, vs.structures[-1], t.operation)
        return t

    def _enter_secure(self, vs: ThreadVerifierState, a: Action) -> Optional[AnomalyReport]:
        name = self.model.secure.get(a.value)
        if name is None:
            return self._fail(vs, a, Classification.UNKNOWN_EDGE, f"no secure function with index {a.value}")
        vs.function, vs.cursor = name, None
        vs.shadow = [ShadowEntry(None, None, None)]
        vs.position = Position.IN_ECALL
        return None

    def _save(self, vs: ThreadVerifierState, kind: str) -> None:
        vs.contexts.append(SavedContext(kind, vs.position, vs.function, vs.cursor,
                                        tuple(vs.shadow), vs.state.usage))

    def _restore(self, vs: ThreadVerifierState, ctx: SavedContext) -> None:
        vs.position, vs.function, vs.cursor = ctx.position, ctx.function, ctx.cursor
        vs.shadow = list(ctx.shadow)

    def _on_outside_n(self, vs, a):
        if a.value >= 0:
            return self._enter_secure(vs, a)
        if a.value == EXCEPTION_INDEX:
            self._save(vs, "exception")
            vs.position = Position.EXCEPTION_ENTERED
            return None
        return self._fail(vs, a, Classification.INVALID_STATE_TRANSITION, f"EENTER index {a.value} from outside")

    def _on_ecall_n(self, vs, a):
        if a.value == EXCEPTION_INDEX:
            self._save(vs, "exception")
            vs.position = Position.EXCEPTION_ENTERED
            return None
        reason = "thread already in use" if a.value >= 0 else f"EENTER index {a.value} inside an ECALL"
        return self._fail(vs, a, Classification.INVALID_STATE_TRANSITION, reason)

    def _on_ecall_t(self, vs, a):
        if vs.function is not None:
            return self._fail(vs, a, Classification.INVALID_STATE_TRANSITION,
                              f"ERET while '{vs.function}' has not returned")
        if vs.contexts and vs.contexts[-1].kind == "ecall":
            self._restore(vs, vs.contexts.pop())
        else:
            vs.shadow, vs.cursor = [], None
            vs.position = Position.OUTSIDE
        return None

    def _on_ecall_g(self, vs, a):
        if vs.function is None:
            return self._fail(vs, a, Classification.UNKNOWN_EDGE, "OCALL after the secure function returned")
        matched = self.model.functions[vs.function].graph.match(vs.cursor, a)
        if not matched:
            return self._fail(vs, a, Classification.UNKNOWN_EDGE)
        vs.cursor = matched
        vs.structures.append(a.value)
        vs.position = Position.OCALL_GENERATED
        return None

    def _on_generated_d(self, vs, a):
        vs.position = Position.IN_OCALL_OUT
        return None

    def _on_ocall_out_n(self, vs, a):
        if a.value == ORET_INDEX:
            vs.position = Position.ORET_ENTERED
            return None
        if a.value >= 0:
            self._save(vs, "ecall")
            return self._enter_secure(vs, a)
        return self._fail(vs, a, Classification.INVALID_STATE_TRANSITION, f"EENTER index {a.value} during an OCALL")

    def _consume(self, vs, a) -> Optional[AnomalyReport]:
        if not vs.structures or vs.structures[-1] != a.value:
            top = f"{vs.structures[-1]:#018x}" if vs.structures else "-"
            return self._fail(vs, a, Classification.STRUCTURE_MISMATCH, f"stored structure is {top}")
        vs.structures.pop()
        return None

    def _on_oret_c(self, vs, a):
        report = self._consume(vs, a)
        if report is None:
            vs.position = Position.IN_ECALL
        return report

    def _on_exception_j(self, vs, a):
        vs.structures.append(a.value)
        vs.position = Position.IN_EXCEPTION_TH
        return None

    def _on_th_t(self, vs, a):
        vs.position = Position.EXCEPTION_OUT
        return None

    def _on_out_r(self, vs, a):
        vs.function, vs.cursor, vs.shadow = DISPATCHER_NAME, None, []
        vs.position = Position.IN_EXCEPTION_IH
        return None

    def _match_dispatcher(self, vs, a) -> Optional[AnomalyReport]:
        if vs.function != DISPATCHER_NAME:
            return self._fail(vs, a, Classification.INVALID_STATE_TRANSITION,
                              f"{a.atype.letter} while '{vs.function}' is running")
        matched = self.model.functions[DISPATCHER_NAME].graph.match(vs.cursor, a)
        if not matched:
            return self._fail(vs, a, Classification.UNKNOWN_EDGE)
        vs.cursor = matched
        return None

    def _on_ih_k(self, vs, a):
        report = self._match_dispatcher(vs, a) or self._consume(vs, a)
        if report is not None:
            return report
        if a.src == DISPATCH_K_SRC:
            vs.position = Position.EXCEPTION_DISPATCHING
            return None
        # continue_execution: resume where the exception struck
        ctx = vs.contexts.pop() if vs.contexts and vs.contexts[-1].kind == "exception" else None
        if ctx is None:
            return self._fail(vs, a, Classification.INVALID_STATE_TRANSITION, "no suspended context to resume")
        self._restore(vs, ctx)
        vs.state = StateTriplet(ctx.usage, vs.state.structure, vs.state.operation)
        return None

    def _on_dispatching_j(self, vs, a):
        report = self._match_dispatcher(vs, a)
        if report is not None:
            return report
        vs.structures.append(a.value)
        vs.position = Position.IN_EXCEPTION_IH
        return None

    # --- read-only queries ---

    def status(self, thread_id: int) -> ThreadStatus:
        with self._lock:
            vs = self.threads.get(thread_id)
            if vs is None:
                return ThreadStatus(thread_id, "unseen", StateTriplet(), Position.OUTSIDE.value)
            verdict = "trusted" if vs.trusted else "untrusted"
            return ThreadStatus(thread_id, verdict, vs.state, vs.position.value, vs.report)

    def snapshot(self) -> List[ThreadStatus]:
        with self._lock:
            return [self.status(tid) for tid in sorted(self.threads)]

    @property
    def trusted(self) -> bool:
        with self._lock:
            return self.channel_verdict is None and all(vs.trusted for vs in self.threads.values())


_TRANSITIONS = {
    (Position.OUTSIDE, ActionType.N): Verifier._on_outside_n,
    (Position.IN_ECALL, ActionType.N): Verifier._on_ecall_n,
    (Position.IN_ECALL, ActionType.T): Verifier._on_ecall_t,
    (Position.IN_ECALL, ActionType.G): Verifier._on_ecall_g,
    (Position.OCALL_GENERATED, ActionType.D): Verifier._on_generated_d,
    (Position.IN_OCALL_OUT, ActionType.N): Verifier._on_ocall_out_n,
    (Position.ORET_ENTERED, ActionType.C): Verifier._on_oret_c,
    (Position.EXCEPTION_ENTERED, ActionType.J): Verifier._on_exception_j,
    (Position.IN_EXCEPTION_TH, ActionType.T): Verifier._on_th_t,
    (Position.EXCEPTION_OUT, ActionType.R): Verifier._on_out_r,
    (Position.IN_EXCEPTION_IH, ActionType.K): Verifier._on_ih_k,
    (Position.EXCEPTION_DISPATCHING, ActionType.J): Verifier._on_dispatching_j,
}
