# lib/actions.py
"""
Shared vocabulary of the extractor, the simulated enclave and the verifier:
action kinds, transition rules, the per-thread state triplet, transactions,
and the canonical 32-byte action encoding.
"""
import hashlib
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Optional, Tuple

# --- Encoding constants ---

ACTION_SIZE = 32
MASK64 = (1 << 64) - 1
_LAYOUT = struct.Struct("<BBHQQ12x")  # tag, flags, thread, src, value, padding

FLAG_VALUE_NULL = 0x01
FLAG_SRC_NULL = 0x02
_KNOWN_FLAGS = FLAG_VALUE_NULL | FLAG_SRC_NULL

# --- Simulated SDK runtime addresses ---
# The SDK trampolines live below the first enclave function (0x401000).

SDK_ENTER_SRC = 0x1000        # enter_enclave: EENTER
SDK_EXIT_SRC = 0x1040         # enter_enclave: EEXIT (ERET)
SDK_DO_OCALL_SRC = 0x1080     # do_ocall: EEXIT (OCALL)
SDK_ORET_SRC = 0x10C0         # EENTER for ORET
SDK_ASM_ORET_SRC = 0x1100     # asm_oret: ocall_context consumption
SDK_TRTS_HANDLE_SRC = 0x1140  # trts_handle_exception: exception info generation
SDK_ERESUME_SRC = 0x1180
DISPATCH_ENTRY = 0x2000       # internal_handle_exception
DISPATCH_K_SRC = 0x2010
DISPATCH_CALL_SRC = 0x2020
DISPATCH_J_SRC = 0x2030
CONTINUE_SRC = 0x2100         # continue_execution

ORET_INDEX = -2
EXCEPTION_INDEX = -3

CALL_INSN_SIZE = 5


class MalformedActionError(ValueError):
    pass

class ContractViolationError(Exception):
    pass


class ActionType(IntEnum):
    """Tag byte values, assigned alphabetically by letter; 0 is reserved."""
    A = 1   # function-pointer assignment
    B = 2   # conditional branch
    C = 3   # ocall_context consumption
    D = 4   # EEXIT from do_ocall (OCALL)
    E = 5   # call / indirect jump / return edge
    G = 6   # ocall_context generation
    J = 7   # exception info generation
    K = 8   # exception info consumption
    N = 9   # EENTER
    R = 10  # ERESUME
    T = 11  # EEXIT from enter_enclave (ERET)
    V = 12  # virtual-pointer assignment

    @property
    def letter(self) -> str:
        return self.name

    @classmethod
    def from_letter(cls, letter: str) -> "ActionType":
        try:
            return cls[letter]
        except KeyError:
            raise MalformedActionError(f"Unknown action letter '{letter}'.")


GENERIC_TYPES = frozenset({ActionType.E, ActionType.B, ActionType.A, ActionType.V})
STOP_TYPES = frozenset(set(ActionType) - GENERIC_TYPES)
_NULL_VALUE_TYPES = frozenset({ActionType.R, ActionType.T, ActionType.D})


def is_stop(atype: ActionType) -> bool:
    return atype in STOP_TYPES


def return_site(call_src: int) -> int:
    """Value a return carries when it goes back to the call at call_src."""
    return call_src + CALL_INSN_SIZE


def structure_hash(data: bytes) -> int:
    """64-bit truncation of SHA-256, used for ocall_context and exception info."""
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


@dataclass(frozen=True)
class Action:
    atype: ActionType
    src: Optional[int]
    value: Optional[int] = None

    def validate(self) -> None:
        t = self.atype
        if self.src is None and t is not ActionType.E:
            raise MalformedActionError(f"{t.letter} action requires a source address.")
        if self.src is not None and not 0 <= self.src <= MASK64:
            raise MalformedActionError(f"Source address out of range: {self.src}")
        if t in _NULL_VALUE_TYPES:
            if self.value is not None:
                raise MalformedActionError(f"{t.letter} action carries a null value.")
            return
        if t is ActionType.E:
            if self.value is not None and not 0 <= self.value <= MASK64:
                raise MalformedActionError(f"E target out of range: {self.value}")
            return
        if self.value is None:
            raise MalformedActionError(f"{t.letter} action requires a value.")
        if t is ActionType.B and self.value not in (0, 1):
            raise MalformedActionError(f"B action value must be 0 or 1, got {self.value}.")
        if t is ActionType.N:
            if not -(1 << 63) <= self.value < (1 << 63):
                raise MalformedActionError(f"N index out of range: {self.value}")
        elif not 0 <= self.value <= MASK64:
            raise MalformedActionError(f"{t.letter} value out of range: {self.value}")

    def __str__(self) -> str:
        src = "-" if self.src is None else hex(self.src)
        if self.value is None:
            value = "-"
        elif self.atype in (ActionType.N, ActionType.B):
            value = str(self.value)
        else:
            value = hex(self.value)
        return f"({self.atype.letter},{src},{value})"


def action_encode(action: Action, thread_id: int) -> bytes:
    action.validate()
    if not 0 <= thread_id <= 0xFFFF:
        raise MalformedActionError(f"Thread id out of range: {thread_id}")
    flags = 0
    if action.value is None:
        flags |= FLAG_VALUE_NULL
    if action.src is None:
        flags |= FLAG_SRC_NULL
    src = 0 if action.src is None else action.src
    value = 0 if action.value is None else action.value & MASK64
    return _LAYOUT.pack(int(action.atype), flags, thread_id, src, value)


_TAGS = (None,) + tuple(ActionType)
_PADDING = bytes(ACTION_SIZE - 20)


def action_decode(data: bytes) -> Tuple[Action, int]:
    """Inverse of action_encode; returns (action, thread_id).

    Field ranges follow from the layout, so only the per-type shape is checked here.
    """
    if len(data) != ACTION_SIZE:
        raise MalformedActionError(f"Action encoding must be {ACTION_SIZE} bytes, got {len(data)}.")
    if data[20:] != _PADDING:
        raise MalformedActionError("Nonzero padding in action encoding.")
    tag, flags, thread_id, src, value = _LAYOUT.unpack(data)
    if not 0 < tag < len(_TAGS):
        raise MalformedActionError(f"Unknown action tag {tag}.")
    atype = _TAGS[tag]
    if flags & ~_KNOWN_FLAGS:
        raise MalformedActionError(f"Unknown flag bits 0x{flags:02x}.")
    if flags & FLAG_SRC_NULL:
        if src:
            raise MalformedActionError("Null source flag with nonzero source bytes.")
        if atype is not ActionType.E:
            raise MalformedActionError(f"{atype.letter} action requires a source address.")
        src = None
    if flags & FLAG_VALUE_NULL:
        if value:
            raise MalformedActionError("Null value flag with nonzero value bytes.")
        if atype not in _NULL_VALUE_TYPES and atype is not ActionType.E:
            raise MalformedActionError(f"{atype.letter} action requires a value.")
        value = None
    elif atype in _NULL_VALUE_TYPES:
        raise MalformedActionError(f"{atype.letter} action carries a null value.")
    elif atype is ActionType.N:
        if value >= 1 << 63:
            value -= 1 << 64
    elif atype is ActionType.B and value > 1:
        raise MalformedActionError(f"B action value must be 0 or 1, got {value}.")
    return Action(atype, src, value), thread_id


# --- Transition rules ---

_CONDITION_OPS = {
    "==": lambda v, k: v == k,
    "!=": lambda v, k: v != k,
    ">=": lambda v, k: v >= k,
    "<=": lambda v, k: v <= k,
    ">": lambda v, k: v > k,
    "<": lambda v, k: v < k,
}


@dataclass(frozen=True, order=True)
class Condition:
    op: str
    operand: int

    def __post_init__(self):
        if self.op not in _CONDITION_OPS:
            raise ValueError(f"Unsupported condition operator '{self.op}'.")

    def holds(self, value: Optional[int]) -> bool:
        if value is None:
            return False
        return _CONDITION_OPS[self.op](value, self.operand)

    def __str__(self) -> str:
        operand = hex(self.operand) if self.operand > 0xFF else str(self.operand)
        return f"{self.op}{operand}"

    @classmethod
    def parse(cls, text: str) -> Optional["Condition"]:
        if text == "-":
            return None
        # two-character operators first
        for op in ("==", "!=", ">=", "<=", ">", "<"):
            if text.startswith(op):
                try:
                    return cls(op, int(text[len(op):], 0))
                except ValueError:
                    break
        raise ValueError(f"Malformed condition '{text}'.")


@dataclass(frozen=True)
class TransitionRule:
    expected: ActionType
    condition: Optional[Condition] = None

    def matches(self, action: Action) -> bool:
        if action.atype is not self.expected:
            return False
        return self.condition is None or self.condition.holds(action.value)


# --- State triplet ---

class Usage(str, Enum):
    IN_USE = "in-use"
    NON_IN_USE = "non-in-use"


class StructureOp(str, Enum):
    NONE = "-"
    G = "G"
    C = "C"


@dataclass(frozen=True)
class StateTriplet:
    usage: Usage = Usage.NON_IN_USE
    structure: Optional[int] = None
    operation: StructureOp = StructureOp.NONE

    def __str__(self) -> str:
        structure = "-" if self.structure is None else f"{self.structure:#018x}"
        return f"({self.usage.value},{structure},{self.operation.value})"


def state_apply(state: StateTriplet, action: Action) -> StateTriplet:
    t = action.atype
    if not is_stop(t):
        raise ContractViolationError(f"state_apply needs a stop action, got {t.letter}.")
    if t in (ActionType.N, ActionType.R):
        return StateTriplet(Usage.IN_USE, state.structure, state.operation)
    if t in (ActionType.T, ActionType.D):
        return StateTriplet(Usage.NON_IN_USE, state.structure, state.operation)
    if t in (ActionType.G, ActionType.J):
        return StateTriplet(state.usage, action.value, StructureOp.G)
    # C / K
    return StateTriplet(state.usage, None, StructureOp.C)


@dataclass(frozen=True)
class Transaction:
    body: Tuple[Action, ...]
    terminator: Action

    def __post_init__(self):
        for a in self.body:
            if is_stop(a.atype):
                raise ContractViolationError(f"Transaction body holds stop action {a}.")
        if not is_stop(self.terminator.atype):
            raise ContractViolationError(f"Transaction terminator {self.terminator} is not a stop action.")
