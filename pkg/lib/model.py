# lib/model.py
"""
Graphs of actions and the enclave model, plus the deterministic model file
format sealed with an HMAC.
"""
import hashlib
import hmac
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

from lib.actions import (
    Action, ActionType, Condition, TransitionRule, return_site,
)

logger = logging.getLogger(__name__)

MODEL_HEADER = "SGXMON-MODEL 1"
DISPATCHER_NAME = "__internal_handle_exception"

METHOD_SYMBOLIC = "symbolic"
METHOD_FALLBACK = "insensitive-fallback"
METHOD_SYNTHESIZED = "synthesized"

MATCH_CACHE_LIMIT = 1 << 16
_NO_BUCKETS: Dict[tuple, List["ActionPattern"]] = {}


class ModelError(Exception):
    pass

class ModelFormatError(ModelError):
    pass

class ModelIntegrityError(ModelError):
    pass

class DuplicateVertexError(ModelError):
    pass


@dataclass(frozen=True)
class ActionPattern:
    """A vertex of a graph of actions: (type, src, condition)."""
    atype: ActionType
    src: Optional[int]
    condition: Optional[Condition] = None

    @property
    def rule(self) -> TransitionRule:
        return TransitionRule(self.atype, self.condition)

    def matches(self, action: Action) -> bool:
        return action.src == self.src and self.rule.matches(action)

    def sort_key(self):
        src = -1 if self.src is None else self.src
        cond = (0, "", 0) if self.condition is None else (1, self.condition.op, self.condition.operand)
        return (int(self.atype), src, cond)

    def __str__(self) -> str:
        src = "-" if self.src is None else hex(self.src)
        cond = "-" if self.condition is None else str(self.condition)
        return f"({self.atype.letter},{src},{cond})"


def eq(value: int) -> Condition:
    return Condition("==", value)


class ActionGraph:
    def __init__(self):
        self._vertices: Set[ActionPattern] = set()
        self._succ: Dict[ActionPattern, Set[ActionPattern]] = {}
        self._entries: Set[ActionPattern] = set()
        self._index = None
        self._matches: Dict[tuple, FrozenSet[ActionPattern]] = {}

    @property
    def vertices(self) -> FrozenSet[ActionPattern]:
        return frozenset(self._vertices)

    @property
    def entries(self) -> FrozenSet[ActionPattern]:
        return frozenset(self._entries)

    @property
    def edges(self) -> FrozenSet[Tuple[ActionPattern, ActionPattern]]:
        return frozenset((u, v) for u, succ in self._succ.items() for v in succ)

    def __len__(self) -> int:
        return len(self._vertices)

    def __contains__(self, pattern: ActionPattern) -> bool:
        return pattern in self._vertices

    def add_vertex(self, pattern: ActionPattern) -> None:
        if pattern in self._vertices:
            raise DuplicateVertexError(f"Vertex {pattern} already in graph.")
        self._vertices.add(pattern)
        self._succ[pattern] = set()
        self._invalidate()

    def ensure_vertex(self, pattern: ActionPattern) -> None:
        if pattern not in self._vertices:
            self.add_vertex(pattern)

    def add_edge(self, u: ActionPattern, v: ActionPattern) -> None:
        if u not in self._vertices or v not in self._vertices:
            raise ModelError(f"Edge {u} -> {v} references a missing vertex.")
        self._succ[u].add(v)
        self._invalidate()

    def add_entry(self, pattern: ActionPattern) -> None:
        if pattern not in self._vertices:
            raise ModelError(f"Entry {pattern} is not a vertex.")
        self._entries.add(pattern)
        self._invalidate()

    def successors(self, pattern: ActionPattern) -> FrozenSet[ActionPattern]:
        return frozenset(self._succ.get(pattern, ()))

    def next_patterns(self, cursor: Optional[FrozenSet[ActionPattern]]) -> FrozenSet[ActionPattern]:
        """Patterns acceptable after cursor; None means function entry."""
        if cursor is None:
            return self.entries
        out: Set[ActionPattern] = set()
        for p in cursor:
            out |= self._succ.get(p, set())
        return frozenset(out)

    def match(self, cursor: Optional[FrozenSet[ActionPattern]], action: Action) -> FrozenSet[ActionPattern]:
        """Patterns after cursor that accept action; repeated transitions share one result."""
        key = (cursor, action.atype, action.src, action.value)
        matched = self._matches.get(key)
        if matched is not None:
            return matched
        if self._index is None:
            self._build_index()
        bucket = (action.atype, action.src)
        if cursor is None:
            candidates = self._index[None].get(bucket, ())
        else:
            candidates = [p for c in cursor for p in self._index.get(c, _NO_BUCKETS).get(bucket, ())]
        value = action.value
        matched = frozenset(p for p in candidates if p.condition is None or p.condition.holds(value))
        if len(self._matches) >= MATCH_CACHE_LIMIT:
            self._matches.clear()
        self._matches[key] = matched
        return matched

    def _build_index(self) -> None:
        index: Dict[Optional[ActionPattern], Dict[tuple, List[ActionPattern]]] = {}
        def bucket(patterns: Iterable[ActionPattern]) -> Dict[tuple, List[ActionPattern]]:
            b: Dict[tuple, List[ActionPattern]] = {}
            for p in patterns:
                b.setdefault((p.atype, p.src), []).append(p)
            return b
        index[None] = bucket(self._entries)
        for u, succ in self._succ.items():
            index[u] = bucket(succ)
        self._index = index

    def _invalidate(self) -> None:
        self._index = None
        if self._matches:
            self._matches.clear()

    def sorted_vertices(self) -> List[ActionPattern]:
        return sorted(self._vertices, key=ActionPattern.sort_key)

    def same_as(self, other: "ActionGraph") -> bool:
        return (self.vertices == other.vertices and self.edges == other.edges
                and self.entries == other.entries)


@dataclass
class FunctionModel:
    name: str
    address: int
    graph: ActionGraph
    method: str = METHOD_SYMBOLIC
    coverage: float = 1.0


@dataclass
class EnclaveModel:
    functions: Dict[str, FunctionModel] = field(default_factory=dict)
    secure: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self._by_address: Optional[Dict[int, str]] = None
        self._return_sites: Optional[Set[Optional[int]]] = None

    def add_function(self, fm: FunctionModel) -> None:
        if fm.name in self.functions:
            raise ModelError(f"Function '{fm.name}' already in model.")
        self.functions[fm.name] = fm
        self._by_address = None
        self._return_sites = None

    def validate(self) -> None:
        errors = []
        for idx, name in self.secure.items():
            if idx < 0: errors.append(f"secure index {idx} is negative.")
            if name not in self.functions: errors.append(f"secure index {idx} maps to undefined function '{name}'.")
        for fm in self.functions.values():
            for u, v in fm.graph.edges:
                if u not in fm.graph or v not in fm.graph:
                    errors.append(f"{fm.name}: dangling edge {u} -> {v}.")
        if errors:
            raise ModelError("Model validation failed:\n - " + "\n - ".join(errors))

    def function_at(self, address: Optional[int]) -> Optional[str]:
        if self._by_address is None:
            self._by_address = {fm.address: fm.name for fm in self.functions.values()}
        if address is None:
            return None
        return self._by_address.get(address)

    def is_call_pattern(self, pattern: ActionPattern) -> bool:
        c = pattern.condition
        return (pattern.atype is ActionType.E and c is not None and c.op == "=="
                and self.function_at(c.operand) is not None)

    @property
    def return_sites(self) -> Set[Optional[int]]:
        """Every value a legitimate return may carry; None is the root secure-function return."""
        if self._return_sites is None:
            sites: Set[Optional[int]] = {None}
            for fm in self.functions.values():
                for p in fm.graph.vertices:
                    if p.src is not None and self.is_call_pattern(p):
                        sites.add(return_site(p.src))
            self._return_sites = sites
        return self._return_sites

    # --- serialization ---

    def serialize_body(self) -> str:
        lines = [MODEL_HEADER]
        for idx in sorted(self.secure):
            lines.append(f"SECURE {idx} {self.secure[idx]}")
        for name in sorted(self.functions):
            fm = self.functions[name]
            lines.append(f"FUNC {name} {fm.address:#x} {fm.method} {fm.coverage:.4f}")
            ordered = fm.graph.sorted_vertices()
            ids = {p: i for i, p in enumerate(ordered)}
            entry_ids = sorted(ids[p] for p in fm.graph.entries)
            lines.append("ENTRY" + "".join(f" {i}" for i in entry_ids))
            for p in ordered:
                src = "-" if p.src is None else f"{p.src:#x}"
                cond = "-" if p.condition is None else str(p.condition)
                lines.append(f"V {ids[p]} {p.atype.letter} {src} {cond}")
            for a, b in sorted((ids[u], ids[v]) for u, v in fm.graph.edges):
                lines.append(f"E {a} {b}")
        return "\n".join(lines) + "\n"

    def serialize(self, mac_key: bytes) -> str:
        body = self.serialize_body()
        return body + f"MAC {model_mac(body, mac_key)}\n"

    def save(self, path: str, mac_key: bytes) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.serialize(mac_key))
        logger.info(f"Model with {len(self.functions)} functions written to '{path}'.")

    @classmethod
    def load(cls, path: str, mac_key: bytes) -> "EnclaveModel":
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        return cls.parse(text, mac_key)

    @classmethod
    def parse(cls, text: str, mac_key: Optional[bytes]) -> "EnclaveModel":
        """Parses a model file; with a key, the trailing MAC must verify."""
        lines = text.splitlines(keepends=True)
        if not lines or not lines[-1].startswith("MAC "):
            raise ModelIntegrityError("Model file has no trailing MAC line.")
        body = "".join(lines[:-1])
        if mac_key is not None:
            expected = model_mac(body, mac_key)
            if not hmac.compare_digest(expected, lines[-1][4:].strip()):
                raise ModelIntegrityError("Model MAC does not verify; the model file was altered or the key is wrong.")
        return cls._parse_body(body)

    @classmethod
    def _parse_body(cls, body: str) -> "EnclaveModel":
        model = cls()
        current: Optional[FunctionModel] = None
        by_id: Dict[int, ActionPattern] = {}
        pending_entries: List[int] = []

        def finish():
            for i in pending_entries:
                if i not in by_id:
                    raise ModelFormatError(f"{current.name}: entry id {i} is not a vertex.")
                current.graph.add_entry(by_id[i])

        rows = body.splitlines()
        if not rows or rows[0] != MODEL_HEADER:
            raise ModelFormatError("Missing model header.")
        for lineno, row in enumerate(rows[1:], start=2):
            parts = row.split()
            if not parts:
                continue
            try:
                kind = parts[0]
                if kind == "SECURE":
                    model.secure[int(parts[1])] = parts[2]
                elif kind == "FUNC":
                    if current is not None:
                        finish()
                    current = FunctionModel(parts[1], int(parts[2], 0), ActionGraph(), parts[3], float(parts[4]))
                    model.add_function(current)
                    by_id, pending_entries = {}, []
                elif kind == "ENTRY":
                    pending_entries = [int(x) for x in parts[1:]]
                elif kind == "V":
                    src = None if parts[3] == "-" else int(parts[3], 0)
                    p = ActionPattern(ActionType.from_letter(parts[2]), src, Condition.parse(parts[4]))
                    current.graph.add_vertex(p)
                    by_id[int(parts[1])] = p
                elif kind == "E":
                    current.graph.add_edge(by_id[int(parts[1])], by_id[int(parts[2])])
                else:
                    raise ModelFormatError(f"Unknown record '{kind}'.")
            except ModelError as e:
                raise ModelFormatError(f"Line {lineno}: {e}") from e
            except (IndexError, KeyError, ValueError, AttributeError) as e:
                raise ModelFormatError(f"Line {lineno}: malformed record '{row}': {e}") from e
        if current is not None:
            finish()
        model.validate()
        return model


def model_mac(body: str, key: bytes) -> str:
    return hmac.new(key, body.encode("utf-8"), hashlib.sha256).hexdigest()


def load_mac_key(path: str) -> bytes:
    """Key files hold the secret as hex text; anything else is taken as raw bytes."""
    with open(path, "rb") as f:
        raw = f.read()
    try:
        key = bytes.fromhex(raw.decode("ascii").strip())
    except (UnicodeDecodeError, ValueError):
        key = raw
    if not key:
        raise ModelIntegrityError(f"Key file '{path}' is empty.")
    return key
