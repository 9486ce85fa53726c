# lib/target.py
"""
Simulated target enclave.

The interpreter is a chain of generators that yields after every emitted
action, so a scheduler can interleave threads deterministically. Each action
is reported through the channel before the control transfer it describes
takes place.
"""
import logging
import secrets
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Generator, Iterable, List, Optional, Tuple

from lib.actions import (
    CONTINUE_SRC, DISPATCH_CALL_SRC, DISPATCH_J_SRC, DISPATCH_K_SRC, EXCEPTION_INDEX, MASK64, ORET_INDEX,
    SDK_ASM_ORET_SRC, SDK_DO_OCALL_SRC, SDK_ENTER_SRC, SDK_ERESUME_SRC, SDK_EXIT_SRC, SDK_ORET_SRC,
    SDK_TRTS_HANDLE_SRC, Action, ActionType, return_site, structure_hash,
)
from lib.channel import ChannelState, TransportWriteError, emit_dummies, report_log
from lib.program import Function, Instruction, IRRuntimeError, ProgramError, TraceProgram, eval_binop, truth
from lib.transcript import TranscriptEntry

logger = logging.getLogger(__name__)

DEFAULT_MAX_RETRIES = 3
DEFAULT_MAX_DEPTH = 256

# per-thread exception-info records live in a reserved memory region
EXC_INFO_BASE = 0x7F000000
EXC_INFO_STRIDE = 0x1000
EXC_INFO_CELLS = 8
WORD = 8


class SimulationError(Exception):
    pass

class EnclaveCrashError(SimulationError):
    pass


# (ctx, action, kind) -> action to report, or None to suppress it
EmitHook = Callable[["ExecutionContext", Action, str], Optional[Action]]
# (kind, ctx, src) called after the action is reported and before the transfer
Observer = Callable[[str, "ExecutionContext", Optional[int]], None]

Steps = Generator[Action, None, int]


@dataclass
class Frame:
    function: Function
    env: Dict[str, int]
    return_site: Optional[int]
    label: str = ""
    pos: int = 0

    def serialize(self, thread_id: int, at: int) -> bytes:
        env = ",".join(f"{k}={v}" for k, v in sorted(self.env.items()))
        return f"{thread_id}|{self.function.name}|{at:#x}|{env}".encode("utf-8")


@dataclass
class EcallResult:
    index: int
    value: Optional[int] = None
    ok: bool = True
    error: Optional[str] = None


@dataclass
class ExecutionContext:
    thread_id: int
    frames: List[Frame] = field(default_factory=list)
    ocall_contexts: List[int] = field(default_factory=list)
    exception_records: List[int] = field(default_factory=list)
    handling_exception: bool = False
    results: List[EcallResult] = field(default_factory=list)

    @property
    def exception_base(self) -> int:
        return EXC_INFO_BASE + EXC_INFO_STRIDE * self.thread_id


class EnclaveHost:
    """Host driver plus the enclave it runs: ECALLs, OCALL callbacks and exception flows."""

    def __init__(self, program: TraceProgram, channel: Optional[ChannelState] = None,
                 emit_hook: Optional[EmitHook] = None, observer: Optional[Observer] = None,
                 max_exception_retries: int = DEFAULT_MAX_RETRIES, max_call_depth: int = DEFAULT_MAX_DEPTH,
                 dummy_k_max: int = 0, dummy_t_max: float = 0.0, rng=None):
        self.program = program
        self.channel = channel
        self.emit_hook = emit_hook
        self.observer = observer
        self.max_exception_retries = max_exception_retries
        self.max_call_depth = max_call_depth
        self.dummy_k_max = dummy_k_max
        self.dummy_t_max = dummy_t_max
        self.rng = rng or secrets.SystemRandom()
        self.globals: Dict[str, int] = dict(program.globals)
        self.memory: Dict[int, int] = {}
        self.handlers: List[Function] = []
        self.transcript: List[TranscriptEntry] = []
        self.dummies = 0

    # --- emission ---

    def _emit(self, ctx: ExecutionContext, action: Action, kind: str) -> Generator[Action, None, None]:
        if self.emit_hook is not None:
            action = self.emit_hook(ctx, action, kind)
            if action is None:
                return
        if self.channel is not None:
            try:
                report_log(self.channel, action, ctx.thread_id)
                if self.dummy_k_max > 0:
                    self.dummies += emit_dummies(self.channel, self.dummy_k_max, self.dummy_t_max, self.rng)
            except TransportWriteError as e:
                # the enclave keeps running; the monitor sees a cut stream
                logger.warning(f"Thread {ctx.thread_id}: {e}; later packets are dropped.")
        self.transcript.append(TranscriptEntry(ctx.thread_id, action))
        yield action

    def _observe(self, kind: str, ctx: ExecutionContext, src: Optional[int]) -> None:
        if self.observer is not None:
            self.observer(kind, ctx, src)

    # --- interpreter ---

    def _run_function(self, ctx: ExecutionContext, fn: Function, args: List[int],
                      ret_to: Optional[int]) -> Steps:
        if len(ctx.frames) >= self.max_call_depth:
            raise SimulationError(f"Call depth {self.max_call_depth} exceeded entering '{fn.name}'.")
        frame = Frame(fn, dict(zip(fn.param_names, args)), ret_to, fn.entry, 0)
        ctx.frames.append(frame)
        program = self.program
        try:
            while True:
                block = fn.blocks[frame.label]
                if frame.pos >= len(block.instrs):
                    frame.label, frame.pos = block.succ, 0
                    continue
                instr = block.instrs[frame.pos]
                op, a, src = instr.opcode, instr.args, instr.address
                read = lambda tok: program.read(fn, tok, frame.env, self.globals)
                write = lambda name, value: program.write(fn, name, value, frame.env, self.globals)

                if op == "br":
                    taken = bool(truth(program.branch_value(fn, instr, frame.env, self.globals)))
                    yield from self._emit(ctx, Action(ActionType.B, src, int(taken)), "branch")
                    self._observe("branch", ctx, src)
                    frame.label, frame.pos = (block.true_succ if taken else block.false_succ), 0
                    continue
                if op == "ret":
                    value = read(a[0]) if a else 0
                    yield from self._emit(ctx, Action(ActionType.E, src, ret_to), "ret")
                    self._observe("ret", ctx, src)
                    return value
                if op == "call":
                    callee = program.functions[a[1]]
                    values = [read(t) for t in a[2:]]
                    yield from self._emit(ctx, Action(ActionType.E, src, callee.address), "call")
                    self._observe("call", ctx, src)
                    write(instr.dest, (yield from self._run_function(ctx, callee, values, return_site(src))))
                elif op == "icall":
                    target = read(a[1]) & MASK64
                    values = [read(t) for t in a[2:]]
                    yield from self._emit(ctx, Action(ActionType.E, src, target), "icall")
                    callee = program.function_at(target)
                    if callee is None or callee.arity != len(values):
                        raise IRRuntimeError(f"Indirect call at {src:#x} to {target:#x} has no matching function.")
                    self._observe("icall", ctx, src)
                    write(instr.dest, (yield from self._run_function(ctx, callee, values, return_site(src))))
                elif op == "ocall":
                    write(instr.dest, (yield from self._ocall(ctx, frame, instr)))
                elif op in ("fnptr", "vptr"):
                    target = program.functions[a[1]].address
                    atype = ActionType.A if op == "fnptr" else ActionType.V
                    yield from self._emit(ctx, Action(atype, src, target), op)
                    write(instr.dest, target)
                elif op == "assign":
                    write(instr.dest, read(a[1]))
                elif op == "binop":
                    write(instr.dest, eval_binop(a[1], read(a[2]), read(a[3])))
                elif op == "load":
                    write(instr.dest, self.memory.get(read(a[1]), 0))
                elif op == "store":
                    self.memory[read(a[0])] = read(a[1])
                elif op == "register":
                    self._register(instr, read(a[0]))
                elif op == "fault":
                    yield from self._fault(ctx, instr, read)
                frame.pos += 1
        finally:
            ctx.frames.pop()

    def _register(self, instr: Instruction, address: int) -> None:
        handler = self.program.function_at(address)
        if handler is None or handler.arity != 1:
            raise IRRuntimeError(f"register at {instr.address:#x}: {address:#x} is no one-argument function.")
        if handler not in self.handlers:
            self.handlers.append(handler)
            logger.debug(f"Exception handler '{handler.name}' registered.")

    def _fault(self, ctx: ExecutionContext, instr: Instruction, read) -> Generator[Action, None, None]:
        attempts = 0
        code = read(instr.args[0])
        while code:
            attempts += 1
            handled = yield from self._exception(ctx, instr, code)
            if handled:
                return
            if attempts >= self.max_exception_retries:
                raise EnclaveCrashError(f"Unhandled exception at {instr.address:#x} after {attempts} attempts.")
            # the faulting instruction runs again
            code = read(instr.args[0])

    def _ocall(self, ctx: ExecutionContext, frame: Frame, instr: Instruction) -> Steps:
        name = instr.args[1]
        context = structure_hash(frame.serialize(ctx.thread_id, instr.address))
        ctx.ocall_contexts.append(context)
        yield from self._emit(ctx, Action(ActionType.G, instr.address, context), "ocall")
        self._observe("ocall", ctx, instr.address)
        yield from self._emit(ctx, Action(ActionType.D, SDK_DO_OCALL_SRC), "ocall-exit")
        host = self.program.host_ocall(name)
        for ec in host.ecalls:
            yield from self._ecall(ctx, ec.index, ec.args)
        yield from self._emit(ctx, Action(ActionType.N, SDK_ORET_SRC, ORET_INDEX), "oret-enter")
        stored = ctx.ocall_contexts.pop()
        yield from self._emit(ctx, Action(ActionType.C, SDK_ASM_ORET_SRC, stored), "oret")
        self._observe("oret", ctx, SDK_ASM_ORET_SRC)
        return host.ret

    def _exception_hash(self, ctx: ExecutionContext) -> int:
        base = ctx.exception_base
        cells = b"".join((self.memory.get(base + WORD * k, 0) & MASK64).to_bytes(8, "little")
                         for k in range(EXC_INFO_CELLS))
        return structure_hash(cells)

    def _exception(self, ctx: ExecutionContext, instr: Instruction, code: int) -> Generator[Action, None, bool]:
        """Trusted handle, then internal handle. True when a handler reported the fault handled."""
        if ctx.handling_exception:
            raise EnclaveCrashError(f"Fault at {instr.address:#x} while an exception was being handled.")
        ctx.handling_exception = True
        try:
            base = ctx.exception_base
            for k in range(EXC_INFO_CELLS):
                self.memory.pop(base + WORD * k, None)
            self.memory[base] = instr.address
            self.memory[base + WORD] = code
            info = self._exception_hash(ctx)
            ctx.exception_records.append(info)
            # the AEX itself is invisible; the host re-enters at the reserved index
            yield from self._emit(ctx, Action(ActionType.N, SDK_ENTER_SRC, EXCEPTION_INDEX), "exception-enter")
            yield from self._emit(ctx, Action(ActionType.J, SDK_TRTS_HANDLE_SRC, info), "exception-info")
            yield from self._emit(ctx, Action(ActionType.T, SDK_EXIT_SRC), "exception-exit")
            yield from self._emit(ctx, Action(ActionType.R, SDK_ERESUME_SRC), "eresume")
            handled = False
            for handler in list(self.handlers):
                yield from self._emit(ctx, Action(ActionType.K, DISPATCH_K_SRC, info), "dispatch")
                yield from self._emit(ctx, Action(ActionType.E, DISPATCH_CALL_SRC, handler.address), "call")
                self._observe("call", ctx, DISPATCH_CALL_SRC)
                verdict = yield from self._run_function(ctx, handler, [base], return_site(DISPATCH_CALL_SRC))
                info = self._exception_hash(ctx)
                ctx.exception_records[-1] = info
                yield from self._emit(ctx, Action(ActionType.J, DISPATCH_J_SRC, info), "dispatch-info")
                if verdict != 0:
                    handled = True
                    break
            yield from self._emit(ctx, Action(ActionType.K, CONTINUE_SRC, info), "continue")
            self._observe("continue", ctx, CONTINUE_SRC)
            ctx.exception_records.pop()
            return handled
        finally:
            ctx.handling_exception = False

    def _ecall(self, ctx: ExecutionContext, index: int, args: Iterable[int]) -> Steps:
        name = self.program.secure.get(index)
        if name is None:
            raise SimulationError(f"No secure function registered under index {index}.")
        fn = self.program.functions[name]
        yield from self._emit(ctx, Action(ActionType.N, SDK_ENTER_SRC, index), "ecall")
        self._observe("ecall", ctx, SDK_ENTER_SRC)
        value = yield from self._run_function(ctx, fn, list(args), None)
        yield from self._emit(ctx, Action(ActionType.T, SDK_EXIT_SRC), "eret")
        self._observe("eret", ctx, SDK_EXIT_SRC)
        return value

    # --- drivers ---

    def thread_main(self, ctx: ExecutionContext, runs: Iterable[Tuple[int, Tuple[int, ...]]]) -> Generator[Action, None, None]:
        """Runs the ECALL workload of one thread; stops at the first enclave failure."""
        for index, args in runs:
            try:
                value = yield from self._ecall(ctx, index, args)
                ctx.results.append(EcallResult(index, value))
            except (SimulationError, ProgramError) as e:
                logger.error(f"Thread {ctx.thread_id}: ECALL {index} failed: {e}")
                ctx.results.append(EcallResult(index, None, False, str(e)))
                ctx.frames.clear()
                return

    def run_ecall(self, ctx: ExecutionContext, index: int, inputs: Iterable[int]) -> EcallResult:
        for _ in self.thread_main(ctx, [(index, tuple(inputs))]):
            pass
        return ctx.results[-1]

    def run_exception(self, ctx: ExecutionContext, site: int) -> bool:
        """Drives the exception flow for the fault instruction at site; True when it was handled."""
        instr = self.program.instruction_at(site)
        if instr is None or instr.opcode != "fault":
            raise SimulationError(f"No fault instruction at {site:#x}.")
        gen = self._exception(ctx, instr, 1)
        while True:
            try:
                next(gen)
            except StopIteration as stop:
                return bool(stop.value)

    def run_workload(self, threads: int = 1, schedule: Optional[List[int]] = None) -> Dict[int, List[EcallResult]]:
        """Every thread runs the program's RUN list."""
        runs = [(r.index, r.args) for r in self.program.runs]
        scheduler = Scheduler(self, schedule)
        for tid in range(1, threads + 1):
            scheduler.add_thread(tid, runs)
        return scheduler.run()


class Scheduler:
    """Round-robin over threads, one emitted action per step; an explicit schedule takes precedence."""

    def __init__(self, host: EnclaveHost, schedule: Optional[List[int]] = None):
        self.host = host
        self.schedule = list(schedule or [])
        self.contexts: Dict[int, ExecutionContext] = {}
        self._threads: Dict[int, Generator[Action, None, None]] = {}

    def add_thread(self, thread_id: int, runs: List[Tuple[int, Tuple[int, ...]]]) -> ExecutionContext:
        if thread_id in self.contexts:
            raise SimulationError(f"Thread {thread_id} added twice.")
        ctx = ExecutionContext(thread_id)
        self.contexts[thread_id] = ctx
        self._threads[thread_id] = self.host.thread_main(ctx, runs)
        return ctx

    def _step(self, tid: int) -> None:
        try:
            next(self._threads[tid])
        except StopIteration:
            del self._threads[tid]

    def run(self) -> Dict[int, List[EcallResult]]:
        for tid in self.schedule:
            if tid in self._threads:
                self._step(tid)
        ready = deque(sorted(self._threads))
        while ready:
            tid = ready.popleft()
            self._step(tid)
            if tid in self._threads:
                ready.append(tid)
        return {tid: ctx.results for tid, ctx in sorted(self.contexts.items())}


def load_schedule(path: str) -> List[int]:
    """Thread ids separated by whitespace; '#' starts a comment."""
    with open(path, "r", encoding="utf-8") as f:
        tokens = [t for line in f for t in line.split("#", 1)[0].split()]
    try:
        return [int(t) for t in tokens]
    except ValueError as e:
        raise SimulationError(f"Schedule '{path}' holds a non-numeric thread id: {e}") from e
