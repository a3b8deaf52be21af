"""Static analysis: basic blocks, call/return indexing, loops and the branch table.

Nodes are basic blocks that end at any control-flow instruction (or HALT),
or just before another block's entry. A node is identified by its
``(entry, exit)`` address pair, which is exactly what the measurement hashes.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .isa import COND_BRANCHES, TERMINATORS, Opcode, Program, program_digest, validate_program


class AnalysisError(ValueError):
    pass


class EdgeKind(Enum):
    JUMP = "Jump"
    COND_TRUE = "CondTrue"
    COND_FALSE = "CondFalse"
    CALL = "Call"
    RETURN = "Return"
    INDIRECT = "Indirect"


@dataclass(frozen=True)
class Node:
    entry: int
    exit: int

    @property
    def id(self) -> tuple[int, int]:
        return (self.entry, self.exit)

    def __contains__(self, addr: int) -> bool:
        return self.entry <= addr <= self.exit


@dataclass
class Edge:
    src: int  # source node entry
    dst: int | None  # destination node entry; None for unresolved targets
    kind: EdgeKind
    index: int | None = None  # call/return pairing index
    call: bool = False  # Indirect edge produced by BLX

    def key(self) -> tuple:
        return (self.src, self.dst, self.kind.value, self.index)


@dataclass
class CFG:
    program: Program
    nodes: dict[int, Node]  # entry -> node
    edges: list[Edge]
    entry_node: int
    program_digest: bytes
    functions: dict[int, set[int]]  # function entry -> node entries
    returns: dict[int, list[int]]  # function entry -> RET node entries
    call_sites: dict[int, list[int]]  # function entry -> call instruction addresses
    indirect_targets: dict[int, set[int]] = field(default_factory=dict)
    invalid_returns: list[Edge] = field(default_factory=list)
    leaders: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._seg_cache: dict[int, int] = {}

    def node_at(self, addr: int) -> Node | None:
        i = bisect.bisect_right(self.leaders, addr) - 1
        if i < 0:
            return None
        node = self.nodes[self.leaders[i]]
        return node if addr in node else None

    def segment_exit(self, entry: int) -> int:
        """Exit address of the measurement node that starts at ``entry``.

        ``entry`` need not be a node entry (control may land mid-block); the
        segment then runs to the next terminator or block boundary.
        """
        cached = self._seg_cache.get(entry)
        if cached is not None:
            return cached
        code = self.program.instructions
        i = bisect.bisect_right(self.leaders, entry)
        limit = self.leaders[i] - 1 if i < len(self.leaders) else len(code) - 1
        addr = entry
        while addr < limit and code[addr].op not in TERMINATORS:
            addr += 1
        self._seg_cache[entry] = addr
        return addr

    def leaders_between(self, lo: int, hi: int) -> list[int]:
        """Block entries ``L`` with ``lo < L <= hi``."""
        i = bisect.bisect_right(self.leaders, lo)
        j = bisect.bisect_right(self.leaders, hi)
        return self.leaders[i:j]

    def successors(self, entry: int) -> list[Edge]:
        return [e for e in self.edges if e.src == entry]


def _succ_addrs(p: Program, pc: int, indirect: Mapping[int, set[int]], interprocedural: bool) -> list[int]:
    ins = p.instructions[pc]
    op = ins.op
    n = len(p.instructions)
    nxt = [pc + 1] if pc + 1 < n else []
    if op is Opcode.B:
        return [ins.value]
    if op in COND_BRANCHES:
        return [ins.value] + nxt
    if op is Opcode.BL:
        return ([ins.value] if interprocedural else []) + nxt
    if op is Opcode.BLX:
        return (sorted(indirect.get(pc, ())) if interprocedural else []) + nxt
    if op is Opcode.BX:
        return sorted(indirect.get(pc, ()))
    if op in (Opcode.RET, Opcode.HALT):
        return []
    return nxt


def _reach(p: Program, roots: Iterable[int], indirect: Mapping[int, set[int]], interprocedural: bool) -> set[int]:
    seen: set[int] = set()
    work = [r for r in roots if 0 <= r < len(p.instructions)]
    while work:
        pc = work.pop()
        if pc in seen:
            continue
        seen.add(pc)
        for s in _succ_addrs(p, pc, indirect, interprocedural):
            if 0 <= s < len(p.instructions) and s not in seen:
                work.append(s)
    return seen


def build_cfg(p: Program, indirect_targets: Mapping[int, Iterable[int]] | None = None) -> CFG:
    """Build the whole-program CFG.

    ``indirect_targets`` maps BLX/BX addresses to targets observed by
    profiling; without it indirect edges have no destination.
    """
    if not p.instructions:
        raise AnalysisError("empty program has no entry")
    validate_program(p)
    code = p.instructions
    n = len(code)
    indirect = {int(k): set(v) for k, v in (indirect_targets or {}).items()}
    for src, targets in indirect.items():
        if not 0 <= src < n or code[src].op not in (Opcode.BLX, Opcode.BX):
            raise AnalysisError(f"indirect target entry for non-indirect instruction at {src}")
        bad = [t for t in targets if not 0 <= t < n]
        if bad:
            raise AnalysisError(f"indirect targets {bad} at {src} outside program")

    reachable = _reach(p, [0], indirect, interprocedural=True)

    leader_set = {0}
    for pc in reachable:
        ins = code[pc]
        if ins.op in TERMINATORS and pc + 1 < n and pc + 1 in reachable:
            leader_set.add(pc + 1)
        if ins.target is not None:
            leader_set.add(ins.target)
    for targets in indirect.values():
        leader_set |= targets
    leaders = sorted(a for a in leader_set if a in reachable)

    nodes: dict[int, Node] = {}
    for i, start in enumerate(leaders):
        limit = leaders[i + 1] - 1 if i + 1 < len(leaders) else n - 1
        end = start
        while end < limit and code[end].op not in TERMINATORS:
            end += 1
        nodes[start] = Node(start, end)

    # function discovery: entry 0 plus every call target
    function_entries = {0}
    call_sites: dict[int, list[int]] = {}
    for pc in sorted(reachable):
        ins = code[pc]
        if ins.op is Opcode.BL:
            function_entries.add(ins.value)
            call_sites.setdefault(ins.value, []).append(pc)
        elif ins.op is Opcode.BLX:
            for t in sorted(indirect.get(pc, ())):
                function_entries.add(t)
                call_sites.setdefault(t, []).append(pc)

    functions: dict[int, set[int]] = {}
    returns: dict[int, list[int]] = {}
    for f in sorted(function_entries):
        body = _reach(p, [f], indirect, interprocedural=False)
        functions[f] = {e for e in leaders if e in body}
        returns[f] = sorted(nodes[e].entry for e in functions[f] if code[nodes[e].exit].op is Opcode.RET)

    edges: list[Edge] = []
    for entry in leaders:
        node = nodes[entry]
        ins = code[node.exit]
        op = ins.op
        nxt = node.exit + 1
        if op not in TERMINATORS:
            if nxt in nodes:
                edges.append(Edge(entry, nxt, EdgeKind.JUMP))
        elif op is Opcode.B:
            edges.append(Edge(entry, ins.value, EdgeKind.JUMP))
        elif op in COND_BRANCHES:
            edges.append(Edge(entry, ins.value, EdgeKind.COND_TRUE))
            if nxt in nodes:
                edges.append(Edge(entry, nxt, EdgeKind.COND_FALSE))
        elif op is Opcode.BL:
            edges.append(Edge(entry, ins.value, EdgeKind.CALL))
        elif op in (Opcode.BLX, Opcode.BX):
            targets = sorted(indirect.get(node.exit, ()))
            call = op is Opcode.BLX
            if not targets:
                edges.append(Edge(entry, None, EdgeKind.INDIRECT, call=call))
            for t in targets:
                edges.append(Edge(entry, t, EdgeKind.INDIRECT, call=call))
    # return edges: from each RET of a callee back to every call site + 1
    for f, sites in sorted(call_sites.items()):
        for site in sites:
            for ret in returns[f]:
                dst = site + 1 if site + 1 in nodes else None
                edges.append(Edge(ret, dst, EdgeKind.RETURN))
    # RETs in code that is never called have no legal destination
    called = {r for f in call_sites for r in returns[f]}
    for ret in returns.get(0, []):
        if ret not in called:
            edges.append(Edge(ret, None, EdgeKind.RETURN))

    return CFG(
        program=p,
        nodes=nodes,
        edges=edges,
        entry_node=0,
        program_digest=program_digest(p),
        functions=functions,
        returns=returns,
        call_sites=call_sites,
        indirect_targets=indirect,
        leaders=leaders,
    )


def index_call_returns(cfg: CFG) -> CFG:
    """Give each call edge a fresh index and its return edges the same index.

    Return edges that do not land on any call site + 1 are collected in
    ``cfg.invalid_returns``.
    """
    code = cfg.program.instructions
    next_index = 1
    site_index: dict[tuple[int, int], int] = {}  # (call instr addr, callee) -> index
    for e in cfg.edges:
        is_call = e.kind is EdgeKind.CALL or (e.kind is EdgeKind.INDIRECT and e.call and e.dst is not None)
        if is_call:
            site = cfg.nodes[e.src].exit
            e.index = next_index
            site_index[(site, e.dst)] = next_index
            next_index += 1
    cfg.invalid_returns = []
    for e in cfg.edges:
        if e.kind is not EdgeKind.RETURN:
            continue
        e.index = None
        if e.dst is not None and code[e.dst - 1].op in (Opcode.BL, Opcode.BLX):
            site = e.dst - 1
            for f in _functions_of(cfg, e.src):
                if (site, f) in site_index:
                    e.index = site_index[(site, f)]
                    break
        if e.index is None:
            cfg.invalid_returns.append(e)
    return cfg


def _functions_of(cfg: CFG, node_entry: int) -> list[int]:
    return [f for f, body in cfg.functions.items() if node_entry in body]


# -- loops -----------------------------------------------------------------------


class LoopKind(Enum):
    LOOP = "loop"
    RECURSION = "recursion"


class ExitKind(Enum):
    NORMAL = "Normal"
    BREAK = "Break"
    RETURN = "Return"  # leaves the loop by returning from the enclosing function


@dataclass(frozen=True)
class LoopExit:
    src: int  # node entry inside the loop
    dst: int | None  # node entry outside, None for a return
    kind: ExitKind


@dataclass
class Loop:
    header: int
    kind: LoopKind
    function: int
    back_edges: list[int]  # source node entries
    body: frozenset[int]  # node entries
    exits: list[LoopExit]
    parent: int | None = None
    addresses: frozenset[int] = frozenset()

    def contains(self, addr: int) -> bool:
        return addr in self.addresses


@dataclass
class LoopTable:
    loops: list[Loop]  # outer loops before the loops they contain

    def by_header(self, kind: LoopKind = LoopKind.LOOP) -> dict[int, Loop]:
        return {lp.header: lp for lp in self.loops if lp.kind is kind}

    def __len__(self) -> int:
        return len(self.loops)


def _intra_successors(cfg: CFG, f: int) -> dict[int, list[int]]:
    """Intra-procedural node graph of function ``f``; calls are summarised by
    an edge from the call-site node to its return-site node."""
    code = cfg.program.instructions
    body = cfg.functions[f]
    succ: dict[int, list[int]] = {e: [] for e in body}
    for e in cfg.edges:
        if e.src not in body:
            continue
        if e.kind in (EdgeKind.JUMP, EdgeKind.COND_TRUE, EdgeKind.COND_FALSE):
            if e.dst in body:
                succ[e.src].append(e.dst)
        elif e.kind is EdgeKind.INDIRECT and not e.call and e.dst in body:
            succ[e.src].append(e.dst)
    for entry in body:
        exit_ = cfg.nodes[entry].exit
        if code[exit_].op in (Opcode.BL, Opcode.BLX) and exit_ + 1 in body:
            succ[entry].append(exit_ + 1)
    for s in succ.values():
        s[:] = sorted(set(s))
    return succ


def dominators(succ: Mapping[int, list[int]], entry: int) -> dict[int, set[int]]:
    """Iterative dataflow dominator sets over the nodes reachable from ``entry``."""
    order: list[int] = []
    seen = {entry}
    stack = [entry]
    while stack:
        v = stack.pop()
        order.append(v)
        for w in succ.get(v, ()):
            if w not in seen:
                seen.add(w)
                stack.append(w)
    preds: dict[int, list[int]] = {v: [] for v in order}
    for v in order:
        for w in succ.get(v, ()):
            preds[w].append(v)
    everything = set(order)
    dom = {v: set(everything) for v in order}
    dom[entry] = {entry}
    changed = True
    while changed:
        changed = False
        for v in order:
            if v == entry:
                continue
            ps = [dom[p] for p in preds[v]]
            new = set.intersection(*ps) | {v} if ps else {v}
            if new != dom[v]:
                dom[v] = new
                changed = True
    return dom


def _check_reducible(succ: Mapping[int, list[int]], entry: int, dom: Mapping[int, set[int]]) -> None:
    # with back edges (to a dominator) removed the graph must be acyclic
    state: dict[int, int] = {}
    stack: list[tuple[int, int]] = [(entry, 0)]
    state[entry] = 1
    while stack:
        v, i = stack.pop()
        forward = [w for w in succ.get(v, ()) if w not in dom[v]]
        if i < len(forward):
            stack.append((v, i + 1))
            w = forward[i]
            if state.get(w) == 1:
                raise AnalysisError(f"irreducible loop: edge {v}->{w} enters a cycle not headed by a dominator")
            if w not in state:
                state[w] = 1
                stack.append((w, 0))
        else:
            state[v] = 2


def detect_loops(cfg: CFG) -> LoopTable:
    """Natural loops per function, plus direct recursion as call-graph cycles."""
    loops: list[Loop] = []
    for f in sorted(cfg.functions):
        succ = _intra_successors(cfg, f)
        dom = dominators(succ, f)
        _check_reducible(succ, f, dom)
        back: dict[int, list[int]] = {}
        for v in dom:
            for w in succ[v]:
                if w in dom[v]:
                    back.setdefault(w, []).append(v)
        preds: dict[int, list[int]] = {v: [] for v in succ}
        for v, ws in succ.items():
            for w in ws:
                preds[w].append(v)
        for header, sources in sorted(back.items()):
            body = {header}
            work = [s for s in sources if s != header]
            while work:
                v = work.pop()
                if v in body:
                    continue
                body.add(v)
                work.extend(u for u in preds[v] if u not in body)
            exits = []
            for v in sorted(body):
                for w in succ[v]:
                    if w not in body:
                        exits.append(LoopExit(v, w, ExitKind.NORMAL if v == header else ExitKind.BREAK))
                if v in cfg.returns.get(f, ()):
                    exits.append(LoopExit(v, None, ExitKind.RETURN))
            loops.append(Loop(header, LoopKind.LOOP, f, sorted(set(sources)), frozenset(body), exits))

    # call graph: direct recursion becomes a loop keyed by the callee entry
    code = cfg.program.instructions
    calls: dict[int, set[int]] = {f: set() for f in cfg.functions}
    for f, body in cfg.functions.items():
        for entry in body:
            exit_ = cfg.nodes[entry].exit
            if code[exit_].op is Opcode.BL:
                calls[f].add(code[exit_].value)
            elif code[exit_].op is Opcode.BLX:
                calls[f] |= cfg.indirect_targets.get(exit_, set())
    for scc in _sccs(calls):
        if len(scc) > 1:
            raise AnalysisError(f"mutual recursion between functions {sorted(scc)} is not supported")
    for f in sorted(calls):
        if f in calls[f]:
            sites = sorted(
                e for e in cfg.functions[f]
                if code[cfg.nodes[e].exit].op in (Opcode.BL, Opcode.BLX)
                and (code[cfg.nodes[e].exit].value == f or f in cfg.indirect_targets.get(cfg.nodes[e].exit, ()))
            )
            body = frozenset(cfg.functions[f])
            exits = [LoopExit(r, None, ExitKind.RETURN) for r in cfg.returns.get(f, [])]
            loops.append(Loop(f, LoopKind.RECURSION, f, sites, body, exits))

    for lp in loops:
        lp.addresses = frozenset(a for e in lp.body for a in range(cfg.nodes[e].entry, cfg.nodes[e].exit + 1))
    # nesting: the smallest strictly larger loop whose body contains this one
    for lp in loops:
        enclosing = [
            o for o in loops
            if o is not lp and lp.body <= o.body and (len(o.body) > len(lp.body) or o.kind is LoopKind.RECURSION and lp.kind is LoopKind.LOOP)
        ]
        if enclosing:
            parent = min(enclosing, key=lambda o: (len(o.body), o.kind is LoopKind.LOOP))
            lp.parent = parent.header
    depth = {}

    def nest_depth(lp: Loop) -> int:
        if id(lp) not in depth:
            parents = [o for o in loops if o.header == lp.parent and lp.body <= o.body and o is not lp]
            depth[id(lp)] = 0 if not parents else 1 + nest_depth(parents[0])
        return depth[id(lp)]

    loops.sort(key=lambda lp: (nest_depth(lp), lp.function, lp.header))
    return LoopTable(loops)


def _sccs(graph: Mapping[int, set[int]]) -> list[set[int]]:
    # Tarjan, iterative
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    out: list[set[int]] = []
    counter = 0
    for root in graph:
        if root in index:
            continue
        work = [(root, iter(sorted(graph[root])))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in graph:
                    continue
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(graph[w]))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                low[work[-1][0]] = min(low[work[-1][0]], low[v])
            if low[v] == index[v]:
                comp = set()
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.add(w)
                    if w == v:
                        break
                out.append(comp)
    return out


# -- branch table / bundle ---------------------------------------------------------


def branch_table(p: Program) -> dict[int, int]:
    """Control-flow instruction address -> static target, direct branches only."""
    return {i: ins.value for i, ins in enumerate(p.instructions) if ins.target is not None}


@dataclass
class Tables:
    """Everything the measurement engine and the verifier derive from a program."""

    program: Program
    cfg: CFG
    loops: LoopTable
    branches: dict[int, int]

    @property
    def digest(self) -> bytes:
        return self.cfg.program_digest


def analyze(p: Program, indirect_targets: Mapping[int, Iterable[int]] | None = None) -> Tables:
    cfg = index_call_returns(build_cfg(p, indirect_targets))
    return Tables(p, cfg, detect_loops(cfg), branch_table(p))


# -- JSON export -------------------------------------------------------------------


def cfg_to_json(cfg: CFG) -> dict:
    return {
        "program": cfg.program.name,
        "program_digest": cfg.program_digest.hex(),
        "entry_node": cfg.entry_node,
        "nodes": [{"entry": n.entry, "exit": n.exit} for n in cfg.nodes.values()],
        "edges": [
            {"src": e.src, "dst": e.dst, "kind": e.kind.value, "index": e.index}
            | ({"call": True} if e.call else {})
            for e in cfg.edges
        ],
        "functions": {str(f): sorted(body) for f, body in cfg.functions.items()},
        "invalid_returns": [{"src": e.src, "dst": e.dst} for e in cfg.invalid_returns],
    }


def loops_to_json(table: LoopTable) -> list[dict]:
    return [
        {
            "header": lp.header,
            "kind": lp.kind.value,
            "function": lp.function,
            "back_edges": lp.back_edges,
            "body": sorted(lp.body),
            "exits": [{"src": x.src, "dst": x.dst, "kind": x.kind.value} for x in lp.exits],
            "parent": lp.parent,
        }
        for lp in table.loops
    ]


def branch_table_to_json(table: Mapping[int, int]) -> dict[str, int]:
    return {str(k): v for k, v in sorted(table.items())}


def tables_to_json(t: Tables) -> dict:
    return {
        "cfg": cfg_to_json(t.cfg),
        "loops": loops_to_json(t.loops),
        "branch_table": branch_table_to_json(t.branches),
    }
