# lib/cfg.py
"""Static control-flow analysis of IR functions: reachability and natural loops."""
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Set, Tuple

import networkx as nx

from lib.program import DEFINING_OPCODES, Function

logger = logging.getLogger(__name__)

DEFAULT_LOOP_BOUND = 3

# opcodes after which every global may hold a different value
CLOBBERING_OPCODES = frozenset({"call", "icall", "ocall", "fault"})


class IrreducibleCFGError(Exception):
    pass


@dataclass(frozen=True)
class Loop:
    header: str
    body: FrozenSet[str]
    back_edges: FrozenSet[Tuple[str, str]]
    variant: FrozenSet[str]          # locals/params assigned inside the loop
    clobbers_globals: bool
    bound: int = DEFAULT_LOOP_BOUND


@dataclass
class LoopInfo:
    loops: Dict[str, Loop] = field(default_factory=dict)

    @property
    def headers(self) -> FrozenSet[str]:
        return frozenset(self.loops)

    def is_back_edge(self, src: str, dst: str) -> bool:
        loop = self.loops.get(dst)
        return loop is not None and (src, dst) in loop.back_edges


def build_cfg(fn: Function) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(fn.blocks)
    for label, block in fn.blocks.items():
        for succ in block.successors():
            g.add_edge(label, succ)
    return g


def reachable_blocks(fn: Function) -> Set[str]:
    g = build_cfg(fn)
    return {fn.entry} | nx.descendants(g, fn.entry)


def loop_analysis(fn: Function, bound: int = DEFAULT_LOOP_BOUND) -> LoopInfo:
    """Finds natural loops through the dominator tree of the reachable CFG.

    Raises IrreducibleCFGError when a cycle is left after removing the back
    edges, i.e. some loop has more than one entry.
    """
    g = build_cfg(fn)
    g = g.subgraph({fn.entry} | nx.descendants(g, fn.entry)).copy()
    idom = nx.immediate_dominators(g, fn.entry)

    def dominates(a: str, b: str) -> bool:
        while True:
            if a == b:
                return True
            parent = idom.get(b, b)
            if parent == b:
                return False
            b = parent

    back_edges = [(u, v) for u, v in g.edges if dominates(v, u)]
    forward = g.copy()
    forward.remove_edges_from(back_edges)
    if not nx.is_directed_acyclic_graph(forward):
        cycle = nx.find_cycle(forward)
        raise IrreducibleCFGError(f"Function '{fn.name}' has an irreducible loop through {[e[0] for e in cycle]}.")

    info = LoopInfo()
    by_header: Dict[str, Set[Tuple[str, str]]] = {}
    for u, h in back_edges:
        by_header.setdefault(h, set()).add((u, h))
    for header, edges in sorted(by_header.items()):
        body = {header}
        # everything that reaches a latch without passing the header
        stack = [u for u, _ in edges]
        while stack:
            n = stack.pop()
            if n in body:
                continue
            body.add(n)
            stack.extend(g.predecessors(n))
        instrs = [i for label in body for i in fn.blocks[label].instrs]
        variant = frozenset(i.dest for i in instrs if i.opcode in DEFINING_OPCODES and i.dest is not None)
        clobbers = any(i.opcode in CLOBBERING_OPCODES for i in instrs)
        info.loops[header] = Loop(header, frozenset(body), frozenset(edges), variant, clobbers, bound)
    logger.debug(f"Loop analysis of '{fn.name}': headers {sorted(info.loops)}")
    return info
