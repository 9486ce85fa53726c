# lib/extractor.py
"""
Model extraction: one graph of actions per IR function.

Each function is explored on its own with globals and parameters left
unconstrained. Conditions are decided by constant folding; anything over a
symbol forks both ways. Loops are unrolled up to their bound and then
widened. Symbols carry no identity, so a path that enters a block in an
abstract state already seen there cannot add an edge and is merged. A function that times out, exceeds the path cap or has an
irreducible CFG falls back to the insensitive CFG traversal.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, List, Optional, Set, Tuple

from lib.actions import (
    CONTINUE_SRC, DISPATCH_CALL_SRC, DISPATCH_ENTRY, DISPATCH_J_SRC, DISPATCH_K_SRC, ActionType,
)
from lib.cfg import DEFAULT_LOOP_BOUND, IrreducibleCFGError, LoopInfo, loop_analysis, reachable_blocks
from lib.model import (
    DISPATCHER_NAME, METHOD_FALLBACK, METHOD_SYMBOLIC, METHOD_SYNTHESIZED,
    ActionGraph, ActionPattern, EnclaveModel, FunctionModel, eq,
)
from lib.program import Function, Instruction, Symbol, TraceProgram, Value, eval_binop, parse_literal, truth

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0
DEFAULT_PATH_CAP = 10_000
_CLOCK_EVERY = 256  # steps between wall-clock checks


class ExtractionError(Exception):
    pass

class ModelBuildError(ExtractionError):
    pass

class ExplorationTimeout(ExtractionError):
    pass


# A hook may rewrite the symbolic environment of one function before exploration.
EnvOverride = Callable[[Function, Dict[str, Value], Dict[str, Value]], None]


@dataclass
class ExplorationResult:
    function: str
    graph: ActionGraph
    coverage: float
    method: str
    elapsed: float = 0.0
    paths: int = 0
    sites: int = 0
    note: str = ""


def set_symbolic_globals(program: TraceProgram) -> Dict[str, Value]:
    return {name: Symbol(f"global:{name}") for name in sorted(program.globals)}


def set_symbolic_free_args(fn: Function) -> Dict[str, Value]:
    return {p.name: Symbol(f"{p.kind}:{p.name}") for p in fn.params}


def icall_targets(program: TraceProgram, target: Value, argc: int) -> List[Function]:
    """Concrete targets resolve directly; unknown ones fan out to every function of matching arity."""
    if isinstance(target, Symbol):
        return program.functions_with_arity(argc)
    fn = program.function_at(target)
    return [fn] if fn is not None and fn.arity == argc else []


def _abstract(values: Dict[str, Value]) -> Tuple:
    return tuple(sorted((k, v if isinstance(v, int) else "?") for k, v in values.items()))


def _coverage(fn: Function, covered: Set[int]) -> Tuple[float, int]:
    sites = set(fn.action_sites(reachable_blocks(fn)))
    if not sites:
        return 1.0, 0
    return len(covered & sites) / len(sites), len(sites)


# --- Symbolic exploration ---

@dataclass
class _PathState:
    label: str
    pos: int
    env: Dict[str, Value]
    globals_: Dict[str, Value]
    prev: Optional[ActionPattern] = None
    counts: Dict[str, int] = field(default_factory=dict)

    def fork(self) -> "_PathState":
        return _PathState(self.label, self.pos, dict(self.env), dict(self.globals_), self.prev, dict(self.counts))


class _Explorer:
    def __init__(self, program: TraceProgram, fn: Function, loops: LoopInfo,
                 timeout: float, path_cap: int, clock: Callable[[], float]):
        self.program = program
        self.fn = fn
        self.loops = loops
        self.timeout = timeout
        self.path_cap = path_cap
        self.clock = clock
        self.started = clock()
        self.graph = ActionGraph()
        self.covered: Set[int] = set()
        self.seen: Set[tuple] = set()
        self.enclosing = {label: frozenset(h for h, loop in loops.loops.items() if label in loop.body)
                          for label in fn.blocks}
        self.paths = 0
        self.merged = 0
        self.steps = 0

    def visit(self, state: _PathState, pattern: ActionPattern) -> None:
        self.graph.ensure_vertex(pattern)
        if state.prev is None:
            self.graph.add_entry(pattern)
        else:
            self.graph.add_edge(state.prev, pattern)
        state.prev = pattern
        self.covered.add(pattern.src)

    def end_path(self) -> None:
        self.paths += 1
        if self.paths > self.path_cap:
            raise ExplorationTimeout(f"'{self.fn.name}' exceeded the path cap of {self.path_cap}.")

    def havoc_globals(self, state: _PathState) -> None:
        for name in state.globals_:
            state.globals_[name] = Symbol(f"global:{name}")

    def enter(self, state: _PathState, succ: str) -> bool:
        """Moves to succ; False when succ was already explored from the same abstract state."""
        origin = state.label
        state.label, state.pos = succ, 0
        loop = self.loops.loops.get(succ)
        if loop is not None:
            if (origin, succ) in loop.back_edges:
                count = min(state.counts.get(succ, 0) + 1, loop.bound + 1)
            else:
                count = 0
            state.counts[succ] = count
            if count >= loop.bound:
                for name in loop.variant:
                    self.program.write(self.fn, name, Symbol(f"widened:{name}"), state.env, state.globals_)
                if loop.clobbers_globals:
                    self.havoc_globals(state)
        # counts of loops that do not contain succ are reset before they are read again
        live = self.enclosing[succ]
        key = (succ, state.prev, _abstract(state.env), _abstract(state.globals_),
               tuple(sorted((h, c) for h, c in state.counts.items() if h in live)))
        if key in self.seen:
            self.merged += 1
            return False
        self.seen.add(key)
        return True

    def run(self, env: Dict[str, Value], globals_: Dict[str, Value]) -> None:
        stack = [_PathState(self.fn.entry, 0, dict(env), dict(globals_))]
        while stack:
            state = stack.pop()
            stack.extend(self.step_until_fork(state))

    def step_until_fork(self, state: _PathState) -> List[_PathState]:
        """Runs one path until it forks or ends; returns the states still to explore."""
        program, fn = self.program, self.fn
        while True:
            self.steps += 1
            if self.steps % _CLOCK_EVERY == 0 and self.clock() - self.started > self.timeout:
                raise ExplorationTimeout(f"'{fn.name}' exceeded the exploration timeout of {self.timeout}s.")
            block = fn.blocks[state.label]
            if state.pos >= len(block.instrs):
                if not self.enter(state, block.succ):
                    return []
                continue
            instr = block.instrs[state.pos]
            op, args = instr.opcode, instr.args
            read = lambda tok: program.read(fn, tok, state.env, state.globals_)

            if op == "br":
                decision = truth(program.branch_value(fn, instr, state.env, state.globals_))
                outcomes = [decision] if decision is not None else [True, False]
                pending = []
                for k, taken in enumerate(outcomes):
                    child = state if k == len(outcomes) - 1 else state.fork()
                    self.visit(child, ActionPattern(ActionType.B, instr.address, eq(1 if taken else 0)))
                    if self.enter(child, block.true_succ if taken else block.false_succ):
                        pending.append(child)
                return pending
            if op == "ret":
                self.visit(state, ActionPattern(ActionType.E, instr.address))
                self.end_path()
                return []
            if op == "icall":
                targets = icall_targets(program, read(args[1]), len(args) - 2)
                if not targets:
                    self.end_path()
                    return []
                pending = []
                for k, target in enumerate(targets):
                    child = state if k == len(targets) - 1 else state.fork()
                    self.visit(child, ActionPattern(ActionType.E, instr.address, eq(target.address)))
                    program.write(fn, instr.dest, Symbol("icall"), child.env, child.globals_)
                    self.havoc_globals(child)
                    child.pos += 1
                    pending.append(child)
                return pending

            if op == "call":
                callee = program.functions[args[1]]
                self.visit(state, ActionPattern(ActionType.E, instr.address, eq(callee.address)))
                program.write(fn, instr.dest, Symbol("call"), state.env, state.globals_)
                self.havoc_globals(state)
            elif op == "ocall":
                self.visit(state, ActionPattern(ActionType.G, instr.address))
                program.write(fn, instr.dest, Symbol("ocall"), state.env, state.globals_)
                self.havoc_globals(state)
            elif op in ("fnptr", "vptr"):
                target = program.functions[args[1]].address
                atype = ActionType.A if op == "fnptr" else ActionType.V
                self.visit(state, ActionPattern(atype, instr.address, eq(target)))
                program.write(fn, instr.dest, target, state.env, state.globals_)
            elif op == "assign":
                program.write(fn, instr.dest, read(args[1]), state.env, state.globals_)
            elif op == "binop":
                program.write(fn, instr.dest, eval_binop(args[1], read(args[2]), read(args[3])),
                              state.env, state.globals_)
            elif op == "load":
                program.write(fn, instr.dest, Symbol("load"), state.env, state.globals_)
            elif op == "fault":
                if truth(read(args[0])) is not False:
                    self.havoc_globals(state)
            # store, register, nop: no effect on the abstract state
            state.pos += 1


def symbolic_exploration(program: TraceProgram, fn: Function,
                         env: Optional[Dict[str, Value]] = None,
                         globals_: Optional[Dict[str, Value]] = None,
                         loops: Optional[LoopInfo] = None,
                         timeout: float = DEFAULT_TIMEOUT,
                         path_cap: int = DEFAULT_PATH_CAP,
                         clock: Callable[[], float] = time.monotonic) -> ExplorationResult:
    """Depth-first exploration of the feasible paths of fn.

    Raises ExplorationTimeout on timeout or when the path cap is exceeded.
    """
    loops = loop_analysis(fn) if loops is None else loops
    env = set_symbolic_free_args(fn) if env is None else env
    globals_ = set_symbolic_globals(program) if globals_ is None else globals_
    explorer = _Explorer(program, fn, loops, timeout, path_cap, clock)
    explorer.run(env, globals_)
    coverage, sites = _coverage(fn, explorer.covered)
    elapsed = clock() - explorer.started
    logger.debug(f"Symbolic exploration of '{fn.name}': {explorer.paths} paths, {explorer.merged} merged, "
                 f"{len(explorer.graph)} vertices, coverage {coverage:.2%}")
    return ExplorationResult(fn.name, explorer.graph, coverage, METHOD_SYMBOLIC, elapsed, explorer.paths, sites)


# --- Insensitive fallback ---

def _site_patterns(program: TraceProgram, instr: Instruction) -> List[ActionPattern]:
    op, src = instr.opcode, instr.address
    if op == "br":
        return [ActionPattern(ActionType.B, src, eq(1)), ActionPattern(ActionType.B, src, eq(0))]
    if op == "ret":
        return [ActionPattern(ActionType.E, src)]
    if op == "call":
        return [ActionPattern(ActionType.E, src, eq(program.functions[instr.args[1]].address))]
    if op == "icall":
        return [ActionPattern(ActionType.E, src, eq(f.address))
                for f in program.functions_with_arity(len(instr.args) - 2)]
    if op == "ocall":
        return [ActionPattern(ActionType.G, src)]
    atype = ActionType.A if op == "fnptr" else ActionType.V
    return [ActionPattern(atype, src, eq(program.functions[instr.args[1]].address))]


def insensitive_analysis(program: TraceProgram, fn: Function) -> ExplorationResult:
    """Walks the static CFG ignoring every condition; a superset of the symbolic graph."""
    started = time.monotonic()
    reachable = reachable_blocks(fn)
    first_cache: Dict[str, FrozenSet[ActionPattern]] = {}

    def first_from(label: str) -> FrozenSet[ActionPattern]:
        if label in first_cache:
            return first_cache[label]
        found: Set[ActionPattern] = set()
        visited: Set[str] = set()
        stack = [label]
        while stack:
            l = stack.pop()
            if l in visited:
                continue
            visited.add(l)
            block = fn.blocks[l]
            site = next((i for i in block.instrs if i.emits_action), None)
            if site is not None:
                found.update(_site_patterns(program, site))
            else:
                stack.extend(block.successors())
        first_cache[label] = frozenset(found)
        return first_cache[label]

    edges: List[Tuple[ActionPattern, ActionPattern]] = []
    vertices: Set[ActionPattern] = set()
    for label in sorted(reachable):
        block = fn.blocks[label]
        sites = [i for i in block.instrs if i.emits_action]
        for k, instr in enumerate(sites):
            patterns = _site_patterns(program, instr)
            vertices.update(patterns)
            if instr.opcode == "br":
                for u, succ in zip(patterns, (block.true_succ, block.false_succ)):
                    edges.extend((u, v) for v in first_from(succ))
                continue
            if instr.opcode == "ret":
                continue
            nexts = (frozenset(_site_patterns(program, sites[k + 1])) if k + 1 < len(sites)
                     else first_from(block.succ))
            edges.extend((u, v) for u in patterns for v in nexts)

    graph = ActionGraph()
    for p in sorted(vertices, key=ActionPattern.sort_key):
        graph.add_vertex(p)
    for u, v in edges:
        graph.add_edge(u, v)
    for p in first_from(fn.entry):
        graph.add_entry(p)
    coverage, sites = _coverage(fn, {p.src for p in vertices})
    return ExplorationResult(fn.name, graph, coverage, METHOD_FALLBACK, time.monotonic() - started, 0, sites)


# --- Exception handlers and the dispatcher ---

def _trace_function_value(program: TraceProgram, fn: Function, tok: str, visited: Set[str]) -> Set[str]:
    """Follows fnptr/assign definitions of tok inside fn back to function names."""
    if tok.startswith("&"):
        return {tok[1:]}
    literal = parse_literal(tok)
    if literal is not None:
        target = program.function_at(literal)
        if target is None:
            raise ModelBuildError(f"'{fn.name}': registered handler address {tok} is not a function.")
        return {target.name}
    if tok in visited:
        return set()
    visited.add(tok)
    if tok in fn.param_names or program.is_global(fn, tok):
        raise ModelBuildError(f"'{fn.name}': handler operand '{tok}' comes from outside the function and cannot be resolved.")
    defs = [i for i in fn.instructions() if i.dest == tok]
    if not defs:
        raise ModelBuildError(f"'{fn.name}': handler operand '{tok}' is never defined.")
    names: Set[str] = set()
    for d in defs:
        if d.opcode == "fnptr":
            names.add(d.args[1])
        elif d.opcode == "assign":
            names |= _trace_function_value(program, fn, d.args[1], visited)
        else:
            raise ModelBuildError(f"'{fn.name}': handler operand '{tok}' is defined by '{d.opcode}' at {d.address:#x}.")
    return names


def resolve_exception_handlers(program: TraceProgram) -> List[str]:
    """Every function passed to `register`, in program order."""
    handlers: List[str] = []
    for fn in program.functions.values():
        for instr in fn.instructions():
            if instr.opcode != "register":
                continue
            for name in sorted(_trace_function_value(program, fn, instr.args[0], set())):
                handler = program.functions.get(name)
                if handler is None:
                    raise ModelBuildError(f"Registration at {instr.address:#x} targets unknown function '{name}'.")
                if handler.arity != 1:
                    raise ModelBuildError(f"Handler '{name}' registered at {instr.address:#x} must take exactly one argument.")
                if name not in handlers:
                    handlers.append(name)
    logger.info(f"Resolved {len(handlers)} exception handler(s): {handlers}")
    return handlers


def dispatcher_model(program: TraceProgram, handlers: List[str]) -> FunctionModel:
    """Graph of the SDK exception dispatcher, pruned to the registered handlers."""
    graph = ActionGraph()
    k_next = ActionPattern(ActionType.K, DISPATCH_K_SRC)
    k_cont = ActionPattern(ActionType.K, CONTINUE_SRC)
    j = ActionPattern(ActionType.J, DISPATCH_J_SRC)
    graph.add_vertex(k_cont)
    graph.add_entry(k_cont)
    if handlers:
        graph.add_vertex(k_next)
        graph.add_vertex(j)
        graph.add_entry(k_next)
        for name in handlers:
            call = ActionPattern(ActionType.E, DISPATCH_CALL_SRC, eq(program.functions[name].address))
            graph.add_vertex(call)
            graph.add_edge(k_next, call)
            graph.add_edge(call, j)
        graph.add_edge(j, k_next)
        graph.add_edge(j, k_cont)
    return FunctionModel(DISPATCHER_NAME, DISPATCH_ENTRY, graph, METHOD_SYNTHESIZED, 1.0)


# --- Whole-program extraction ---

def extract_function(program: TraceProgram, fn: Function,
                     timeout: float = DEFAULT_TIMEOUT,
                     path_cap: int = DEFAULT_PATH_CAP,
                     loop_bound: int = DEFAULT_LOOP_BOUND,
                     force_insensitive: bool = False,
                     override: Optional[EnvOverride] = None) -> ExplorationResult:
    try:
        if force_insensitive:
            return insensitive_analysis(program, fn)
        try:
            loops = loop_analysis(fn, loop_bound)
            env = set_symbolic_free_args(fn)
            globals_ = set_symbolic_globals(program)
            if override is not None:
                override(fn, env, globals_)
            return symbolic_exploration(program, fn, env, globals_, loops, timeout, path_cap)
        except (ExplorationTimeout, IrreducibleCFGError) as e:
            logger.warning(f"Falling back to insensitive analysis for '{fn.name}': {e}")
            result = insensitive_analysis(program, fn)
            result.note = str(e)
            return result
    except ExtractionError:
        raise
    except Exception as e:
        raise ExtractionError(f"Function '{fn.name}' could not be extracted: {e}") from e


def extract_model(program: TraceProgram,
                  timeout: float = DEFAULT_TIMEOUT,
                  path_cap: int = DEFAULT_PATH_CAP,
                  loop_bound: int = DEFAULT_LOOP_BOUND,
                  force_insensitive: bool = False,
                  workers: int = 1,
                  overrides: Optional[Dict[str, EnvOverride]] = None,
                  progress: Optional[Callable[[ExplorationResult], None]] = None) -> EnclaveModel:
    if DISPATCHER_NAME in program.functions:
        raise ExtractionError(f"'{DISPATCHER_NAME}' is reserved for the SDK exception dispatcher.")
    overrides = overrides or {}
    handlers = resolve_exception_handlers(program)

    def one(fn: Function) -> ExplorationResult:
        result = extract_function(program, fn, timeout, path_cap, loop_bound,
                                  force_insensitive, overrides.get(fn.name))
        if progress is not None:
            progress(result)
        return result

    functions = list(program.functions.values())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="extract") as pool:
            results = list(pool.map(one, functions))
    else:
        results = [one(fn) for fn in functions]

    model = EnclaveModel(secure=dict(program.secure))
    for result in sorted(results, key=lambda r: r.function):
        fn = program.functions[result.function]
        model.add_function(FunctionModel(fn.name, fn.address, result.graph, result.method, result.coverage))
        logger.info(f"Extracted '{fn.name}' ({result.method}): {len(result.graph)} vertices, "
                    f"{len(result.graph.edges)} edges, coverage {result.coverage:.2%}")
    model.add_function(dispatcher_model(program, handlers))
    model.validate()
    return model
