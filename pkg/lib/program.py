# lib/program.py
"""
The trace-program IR: the code a simulated enclave runs and the extractor
analyzes. Holds the data structures, the textual parser, validation, and
the value semantics shared by the interpreter (concrete values only) and the
extractor (values may be unconstrained symbols).
"""
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple, Union

logger = logging.getLogger(__name__)

FUNCTION_BASE = 0x401000
FUNCTION_STRIDE = 0x1000
INSTR_STRIDE = 0x10

MASK64 = (1 << 64) - 1
DISCARD = "_"

PARAM_KINDS = ("scalar", "ptr", "fnptr")

# opcode -> (min operands, max operands or None for variadic)
OPCODES: Dict[str, Tuple[int, Optional[int]]] = {
    "assign": (2, 2),
    "binop": (4, 4),
    "br": (1, 3),
    "call": (2, None),
    "icall": (2, None),
    "ret": (0, 1),
    "ocall": (2, None),
    "fnptr": (2, 2),
    "vptr": (2, 2),
    "load": (2, 2),
    "store": (2, 2),
    "fault": (1, 1),
    "register": (1, 1),
    "nop": (0, 0),
}

# opcodes whose execution produces a traced action
ACTION_OPCODES = frozenset({"br", "call", "icall", "ret", "fnptr", "vptr", "ocall"})
DEFINING_OPCODES = frozenset({"assign", "binop", "call", "icall", "ocall", "fnptr", "vptr", "load"})

_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


class ProgramError(Exception):
    pass

class ProgramParseError(ProgramError):
    pass

class IRRuntimeError(ProgramError):
    pass


# --- Values ---

class Symbol:
    """An unconstrained value. Every Symbol is distinct; conditions over one fork both ways."""
    __slots__ = ("origin",)

    def __init__(self, origin: str = "?"):
        self.origin = origin

    def __repr__(self) -> str:
        return f"Symbol({self.origin})"


Value = Union[int, Symbol]


def wrap64(v: int) -> int:
    """Two's-complement signed 64-bit wrap-around."""
    v &= MASK64
    return v - (1 << 64) if v >= 1 << 63 else v


def _div(a: int, b: int) -> int:
    if b == 0:
        return 0
    q = abs(a) // abs(b)
    return q if (a < 0) == (b < 0) else -q


def _mod(a: int, b: int) -> int:
    if b == 0:
        return 0
    return a - b * _div(a, b)


BINOPS: Dict[str, Callable[[int, int], int]] = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": _div,
    "%": _mod,
    "&": lambda a, b: a & b,
    "|": lambda a, b: a | b,
    "^": lambda a, b: a ^ b,
    "<<": lambda a, b: a << (b & 63),
    ">>": lambda a, b: a >> (b & 63),
    "==": lambda a, b: int(a == b),
    "!=": lambda a, b: int(a != b),
    "<": lambda a, b: int(a < b),
    "<=": lambda a, b: int(a <= b),
    ">": lambda a, b: int(a > b),
    ">=": lambda a, b: int(a >= b),
}


def eval_binop(op: str, a: Value, b: Value) -> Value:
    """Constant-folds when both operands are concrete; otherwise the result is unconstrained."""
    if isinstance(a, Symbol) or isinstance(b, Symbol):
        return Symbol(op)
    return wrap64(BINOPS[op](a, b))


def truth(v: Value) -> Optional[bool]:
    """Branch decision: True/False when decided, None when both outcomes are feasible."""
    if isinstance(v, Symbol):
        return None
    return v != 0


def parse_literal(tok: str) -> Optional[int]:
    try:
        return int(tok, 0)
    except ValueError:
        return None


# --- Structure ---

@dataclass(frozen=True)
class Param:
    name: str
    kind: str = "scalar"
    arity: Optional[int] = None  # only for fnptr

    def __str__(self) -> str:
        kind = f"fnptr{self.arity}" if self.kind == "fnptr" else self.kind
        return f"{self.name}:{kind}"


@dataclass(frozen=True)
class Instruction:
    opcode: str
    args: Tuple[str, ...]
    address: int
    line: int = 0

    @property
    def dest(self) -> Optional[str]:
        if self.opcode in DEFINING_OPCODES and self.args[0] != DISCARD:
            return self.args[0]
        return None

    @property
    def emits_action(self) -> bool:
        return self.opcode in ACTION_OPCODES

    def __str__(self) -> str:
        return f"{self.address:#x}: {self.opcode} {' '.join(self.args)}".rstrip()


@dataclass
class Block:
    label: str
    instrs: List[Instruction] = field(default_factory=list)
    succ: Optional[str] = None
    true_succ: Optional[str] = None
    false_succ: Optional[str] = None

    @property
    def terminator(self) -> Optional[Instruction]:
        return self.instrs[-1] if self.instrs else None

    def successors(self) -> List[str]:
        out = [s for s in (self.true_succ, self.false_succ) if s is not None]
        if self.succ is not None:
            out.append(self.succ)
        return out


@dataclass
class Function:
    name: str
    index: int
    params: List[Param] = field(default_factory=list)
    blocks: Dict[str, Block] = field(default_factory=dict)

    @property
    def address(self) -> int:
        return FUNCTION_BASE + FUNCTION_STRIDE * self.index

    @property
    def arity(self) -> int:
        return len(self.params)

    @property
    def param_names(self) -> List[str]:
        return [p.name for p in self.params]

    @property
    def entry(self) -> str:
        return next(iter(self.blocks))

    def instructions(self) -> Iterable[Instruction]:
        for block in self.blocks.values():
            yield from block.instrs

    def action_sites(self, labels: Optional[Iterable[str]] = None) -> List[int]:
        blocks = self.blocks.values() if labels is None else (self.blocks[l] for l in labels)
        return sorted(i.address for b in blocks for i in b.instrs if i.emits_action)


@dataclass(frozen=True)
class HostEcall:
    index: int
    args: Tuple[int, ...] = ()


@dataclass
class HostOcall:
    """Scripted behavior of the untrusted host for one OCALL name."""
    name: str
    ret: int = 0
    ecalls: List[HostEcall] = field(default_factory=list)


@dataclass
class TraceProgram:
    source: str = "<string>"
    globals: Dict[str, int] = field(default_factory=dict)
    functions: Dict[str, Function] = field(default_factory=dict)
    secure: Dict[int, str] = field(default_factory=dict)
    host: Dict[str, HostOcall] = field(default_factory=dict)
    runs: List[HostEcall] = field(default_factory=list)

    def __post_init__(self):
        self._by_address: Optional[Dict[int, Function]] = None
        self._instr_index: Optional[Dict[int, Instruction]] = None

    def function_at(self, address: Value) -> Optional[Function]:
        if isinstance(address, Symbol):
            return None
        if self._by_address is None:
            self._by_address = {f.address: f for f in self.functions.values()}
        return self._by_address.get(address)

    def instruction_at(self, address: int) -> Optional[Instruction]:
        if self._instr_index is None:
            self._instr_index = {i.address: i for f in self.functions.values() for i in f.instructions()}
        return self._instr_index.get(address)

    def functions_with_arity(self, arity: int) -> List[Function]:
        return [f for f in self.functions.values() if f.arity == arity]

    def call_sites(self) -> List[int]:
        return sorted(i.address for f in self.functions.values() for i in f.instructions()
                      if i.opcode in ("call", "icall"))

    def host_ocall(self, name: str) -> HostOcall:
        return self.host.get(name) or HostOcall(name)

    def is_global(self, fn: Function, name: str) -> bool:
        return name in self.globals and name not in fn.param_names

    # --- operand access, shared by interpreter and extractor ---

    def read(self, fn: Function, tok: str, env: Dict[str, Value], globals_: Dict[str, Value]) -> Value:
        literal = parse_literal(tok)
        if literal is not None:
            return wrap64(literal)
        if tok.startswith("&"):
            return self.functions[tok[1:]].address
        if self.is_global(fn, tok):
            return globals_[tok]
        return env.get(tok, 0)

    def write(self, fn: Function, name: Optional[str], value: Value,
              env: Dict[str, Value], globals_: Dict[str, Value]) -> None:
        if name is None or name == DISCARD:
            return
        if self.is_global(fn, name):
            globals_[name] = value
        else:
            env[name] = value

    def branch_value(self, fn: Function, instr: Instruction, env: Dict[str, Value],
                     globals_: Dict[str, Value]) -> Value:
        a = self.read(fn, instr.args[0], env, globals_)
        if len(instr.args) == 1:
            return a
        return eval_binop(instr.args[1], a, self.read(fn, instr.args[2], env, globals_))

    # --- validation ---

    def validate(self) -> None:
        errors: List[str] = []
        for idx, name in self.secure.items():
            if idx < 0: errors.append(f"SECURE index {idx} is negative.")
            if name not in self.functions: errors.append(f"SECURE {idx} names undefined function '{name}'.")
        if len(set(self.secure.values())) != len(self.secure):
            errors.append("A function is registered under more than one SECURE index.")
        for fn in self.functions.values():
            errors.extend(self._validate_function(fn))
        for host in self.host.values():
            for ec in host.ecalls:
                errors.extend(self._validate_ecall(ec, f"HOST {host.name}"))
        for ec in self.runs:
            errors.extend(self._validate_ecall(ec, "RUN"))
        if errors:
            raise ProgramError(f"Program '{self.source}' is invalid:\n - " + "\n - ".join(errors))

    def _validate_ecall(self, ec: HostEcall, where: str) -> List[str]:
        if ec.index not in self.secure:
            return [f"{where}: ECALL index {ec.index} is not a secure function."]
        fn = self.functions.get(self.secure[ec.index])
        if fn is not None and fn.arity != len(ec.args):
            return [f"{where}: ECALL {ec.index} passes {len(ec.args)} args, '{fn.name}' takes {fn.arity}."]
        return []

    def _validate_function(self, fn: Function) -> List[str]:
        errors = []
        where = f"function '{fn.name}'"
        if not fn.blocks:
            return [f"{where} has no blocks."]
        preds = {label: 0 for label in fn.blocks}
        for block in fn.blocks.values():
            for s in block.successors():
                if s not in fn.blocks:
                    errors.append(f"{where}: block '{block.label}' has an edge to unknown block '{s}'.")
                else:
                    preds[s] += 1
            for pos, instr in enumerate(block.instrs):
                if instr.opcode in ("br", "ret") and pos != len(block.instrs) - 1:
                    errors.append(f"{where}: '{instr.opcode}' at {instr.address:#x} is not the last instruction of '{block.label}'.")
                errors.extend(self._validate_instruction(fn, instr))
            term = block.terminator
            kind = term.opcode if term is not None else None
            if kind == "br":
                if block.true_succ is None or block.false_succ is None or block.succ is not None:
                    errors.append(f"{where}: branch block '{block.label}' needs exactly one T and one F edge.")
            elif kind == "ret":
                if block.successors():
                    errors.append(f"{where}: returning block '{block.label}' must have no edges.")
            elif block.succ is None or block.true_succ is not None or block.false_succ is not None:
                errors.append(f"{where}: block '{block.label}' needs exactly one plain edge.")
        if sum(len(b.instrs) for b in fn.blocks.values()) * INSTR_STRIDE > FUNCTION_STRIDE:
            errors.append(f"{where} has more instructions than its address range holds.")
        if preds.get(fn.entry):
            errors.append(f"{where}: entry block '{fn.entry}' has predecessors.")
        return errors

    def _validate_instruction(self, fn: Function, instr: Instruction) -> List[str]:
        errors = []
        at = f"'{fn.name}' {instr.address:#x} ({instr.opcode})"
        op, args = instr.opcode, instr.args

        def check_operand(tok: str) -> None:
            if parse_literal(tok) is not None:
                return
            if tok.startswith("&"):
                if tok[1:] not in self.functions:
                    errors.append(f"{at}: unknown function '{tok[1:]}'.")
            elif not _NAME.match(tok) or tok == DISCARD:
                errors.append(f"{at}: bad operand '{tok}'.")

        def check_dest(tok: str) -> None:
            if tok != DISCARD and not _NAME.match(tok):
                errors.append(f"{at}: bad destination '{tok}'.")

        if op in DEFINING_OPCODES:
            check_dest(args[0])
        if op == "assign" or op == "load":
            check_operand(args[1])
        elif op == "binop":
            if args[1] not in BINOPS: errors.append(f"{at}: unknown operator '{args[1]}'.")
            check_operand(args[2]); check_operand(args[3])
        elif op == "br":
            if len(args) == 2: errors.append(f"{at}: comparison needs two operands.")
            check_operand(args[0])
            if len(args) == 3:
                if args[1] not in BINOPS: errors.append(f"{at}: unknown operator '{args[1]}'.")
                check_operand(args[2])
        elif op == "call":
            callee = self.functions.get(args[1])
            if callee is None:
                errors.append(f"{at}: unknown callee '{args[1]}'.")
            elif callee.arity != len(args) - 2:
                errors.append(f"{at}: '{callee.name}' takes {callee.arity} args, {len(args) - 2} given.")
            for a in args[2:]: check_operand(a)
        elif op == "icall":
            for a in args[1:]: check_operand(a)
        elif op == "ocall":
            if not _NAME.match(args[1]): errors.append(f"{at}: bad OCALL name '{args[1]}'.")
            for a in args[2:]: check_operand(a)
        elif op in ("fnptr", "vptr"):
            if args[1] not in self.functions: errors.append(f"{at}: unknown function '{args[1]}'.")
        elif op == "store":
            check_operand(args[0]); check_operand(args[1])
        elif op in ("ret", "fault", "register"):
            for a in args: check_operand(a)
        return errors


# --- Parsing ---

def _parse_param(tok: str, lineno: int) -> Param:
    name, _, kind = tok.partition(":")
    kind = kind or "scalar"
    if not _NAME.match(name):
        raise ProgramParseError(f"Line {lineno}: bad parameter name '{name}'.")
    if kind.startswith("fnptr"):
        arity = parse_literal(kind[5:]) if kind[5:] else None
        if arity is None or arity < 0:
            raise ProgramParseError(f"Line {lineno}: fnptr parameter '{name}' needs an arity, e.g. fnptr1.")
        return Param(name, "fnptr", arity)
    if kind not in PARAM_KINDS:
        raise ProgramParseError(f"Line {lineno}: unknown parameter kind '{kind}'.")
    return Param(name, kind)


def _parse_ints(tokens: List[str], lineno: int) -> Tuple[int, ...]:
    values = []
    for t in tokens:
        v = parse_literal(t)
        if v is None:
            raise ProgramParseError(f"Line {lineno}: expected an integer, got '{t}'.")
        values.append(v)
    return tuple(values)


def _parse_host(parts: List[str], lineno: int) -> HostOcall:
    if len(parts) < 3:
        raise ProgramParseError(f"Line {lineno}: HOST needs a name and a return value.")
    host = HostOcall(parts[1], _parse_ints([parts[2]], lineno)[0])
    rest = parts[3:]
    while rest:
        if rest[0] != "ECALL" or len(rest) < 2:
            raise ProgramParseError(f"Line {lineno}: expected 'ECALL <idx> <args...>' in HOST record.")
        end = next((i for i in range(1, len(rest)) if rest[i] == "ECALL"), len(rest))
        values = _parse_ints(rest[1:end], lineno)
        host.ecalls.append(HostEcall(values[0], values[1:]))
        rest = rest[end:]
    return host


def parse_program(text: str, source: str = "<string>") -> TraceProgram:
    program = TraceProgram(source=source)
    fn: Optional[Function] = None
    block: Optional[Block] = None
    counter = 0

    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        kind = parts[0]
        if kind == "GLOBAL":
            if len(parts) not in (2, 3) or not _NAME.match(parts[1]):
                raise ProgramParseError(f"Line {lineno}: expected 'GLOBAL <name> [<init>]'.")
            program.globals[parts[1]] = _parse_ints(parts[2:], lineno)[0] if len(parts) == 3 else 0
        elif kind == "SECURE":
            if len(parts) != 3:
                raise ProgramParseError(f"Line {lineno}: expected 'SECURE <idx> <function>'.")
            idx = _parse_ints([parts[1]], lineno)[0]
            if idx in program.secure:
                raise ProgramParseError(f"Line {lineno}: SECURE index {idx} declared twice.")
            program.secure[idx] = parts[2]
        elif kind == "FUNC":
            if len(parts) < 2 or not _NAME.match(parts[1]):
                raise ProgramParseError(f"Line {lineno}: expected 'FUNC <name> [params...]'.")
            if parts[1] in program.functions:
                raise ProgramParseError(f"Line {lineno}: function '{parts[1]}' defined twice.")
            fn = Function(parts[1], len(program.functions), [_parse_param(t, lineno) for t in parts[2:]])
            if len(set(fn.param_names)) != fn.arity:
                raise ProgramParseError(f"Line {lineno}: duplicate parameter in '{fn.name}'.")
            program.functions[fn.name] = fn
            block, counter = None, 0
        elif kind == "BLOCK":
            if fn is None or len(parts) != 2:
                raise ProgramParseError(f"Line {lineno}: BLOCK outside a function or missing label.")
            if parts[1] in fn.blocks:
                raise ProgramParseError(f"Line {lineno}: block '{parts[1]}' defined twice in '{fn.name}'.")
            block = Block(parts[1])
            fn.blocks[block.label] = block
        elif kind == "INSTR":
            if block is None or len(parts) < 2:
                raise ProgramParseError(f"Line {lineno}: INSTR outside a block or missing opcode.")
            opcode, args = parts[1], tuple(parts[2:])
            if opcode not in OPCODES:
                raise ProgramParseError(f"Line {lineno}: unknown opcode '{opcode}'.")
            lo, hi = OPCODES[opcode]
            if len(args) < lo or (hi is not None and len(args) > hi):
                raise ProgramParseError(f"Line {lineno}: wrong operand count for '{opcode}'.")
            block.instrs.append(Instruction(opcode, args, fn.address + INSTR_STRIDE * counter, lineno))
            counter += 1
        elif kind == "EDGE":
            if fn is None or len(parts) not in (3, 4):
                raise ProgramParseError(f"Line {lineno}: expected 'EDGE <from> <to> [T|F]'.")
            src = fn.blocks.get(parts[1])
            if src is None:
                raise ProgramParseError(f"Line {lineno}: EDGE from unknown block '{parts[1]}'.")
            tag = parts[3] if len(parts) == 4 else None
            slot = {None: "succ", "T": "true_succ", "F": "false_succ"}.get(tag)
            if slot is None:
                raise ProgramParseError(f"Line {lineno}: edge kind must be T or F, got '{tag}'.")
            if getattr(src, slot) is not None:
                raise ProgramParseError(f"Line {lineno}: duplicate {tag or 'plain'} edge out of '{src.label}'.")
            setattr(src, slot, parts[2])
        elif kind == "HOST":
            host = _parse_host(parts, lineno)
            program.host[host.name] = host
        elif kind == "RUN":
            values = _parse_ints(parts[1:], lineno)
            if not values:
                raise ProgramParseError(f"Line {lineno}: RUN needs a secure-function index.")
            program.runs.append(HostEcall(values[0], values[1:]))
        else:
            raise ProgramParseError(f"Line {lineno}: unknown record '{kind}'.")

    program.validate()
    logger.debug(f"Parsed '{source}': {len(program.functions)} functions, {len(program.globals)} globals.")
    return program


def load_program(path: str) -> TraceProgram:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return parse_program(text, source=path)
