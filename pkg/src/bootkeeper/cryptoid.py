"""Hash-function identification by data-flow-graph normalization and
labeled subgraph isomorphism.

Per-block translation turns instructions into operator DAGs: registers read
before being written become input slots, loads become load slots, copies and
idioms are normalized away.  Reference signatures are derived from the
corpus's canonical implementation; SHA-1's round and initialization
constants act as match labels, all other constants are wildcards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .corpus import (
    ROUND_BODY_LABELS,
    SCHED_BODY_LABEL,
    SHA1_IV,
    SHA1_K,
    reference_hash_source,
)
from .isa import (
    ALU_IMM_OPS,
    ALU_REG_OPS,
    INSTR_SIZE,
    LOAD_BASE,
    MASK32,
    Instruction,
    assemble,
    decode,
)

COMMUTATIVE = {"ADD", "AND", "OR", "XOR"}
TERMINATORS = {"JMP", "JMPR", "CALL", "CALLR", "RET", "HALT", "BEQ", "BNE", "BLTU", "BGEU"}

MATCH_BUDGET = 500_000


class CryptoidError(Exception):
    pass


class MatchBudgetExceeded(CryptoidError):
    pass


@dataclass(frozen=True)
class DfgNode:
    id: int
    kind: str  # operator | "const" | "input" | "load4" | "load1" | "copy"
    value: int | None = None  # const value, or the stable tag of an input slot
    operands: tuple[int, ...] = ()
    block: int | None = None


@dataclass
class Dfg:
    nodes: dict[int, DfgNode] = field(default_factory=dict)
    roots: list[int] = field(default_factory=list)
    final_regs: dict[tuple[int, int], int] = field(default_factory=dict)  # (block, reg) -> node
    store_values: list[int] = field(default_factory=list)

    def add(self, kind: str, value=None, operands: tuple[int, ...] = (),
            block: int | None = None) -> int:
        nid = len(self.nodes)
        self.nodes[nid] = DfgNode(nid, kind, value, operands, block)
        return nid

    def canonical_dump(self) -> tuple:
        """Deterministic structural serialization used for graph equality."""
        order = _topo_order(self)
        index = {nid: i for i, nid in enumerate(order)}
        return tuple(
            (self.nodes[n].kind, self.nodes[n].value,
             tuple(index[o] for o in self.nodes[n].operands))
            for n in order
        ) + (tuple(sorted(index[r] for r in set(self.roots))),)

    def const_values(self) -> set[int]:
        return {n.value for n in self.nodes.values() if n.kind == "const"}


def _topo_order(g: Dfg) -> list[int]:
    seen: set[int] = set()
    order: list[int] = []

    def visit(n: int) -> None:
        stack = [(n, 0)]
        while stack:
            node, i = stack.pop()
            if node in seen and i == 0:
                continue
            ops = g.nodes[node].operands
            if i < len(ops):
                stack.append((node, i + 1))
                if ops[i] not in seen:
                    stack.append((ops[i], 0))
            else:
                if node not in seen:
                    seen.add(node)
                    order.append(node)

    for r in sorted(set(g.roots)):
        visit(r)
    for n in sorted(g.nodes):
        visit(n)
    return order


def build_dfg(instructions: list[Instruction], leaders: set[int] | None = None) -> Dfg:
    """SSA-style translation of one function's instructions.

    A new dataflow scope opens at every leader and after every terminator;
    registers read before written in a scope become input slots, so
    loop-carried values appear as inputs of each iteration body.
    """
    g = Dfg()
    input_tag = 0
    i = 0
    while i < len(instructions):
        block_start = instructions[i].addr
        regs: dict[int, int] = {}

        def read(r: int) -> int:
            nonlocal input_tag
            node = regs.get(r)
            if node is None:
                node = g.add("input", value=input_tag, block=block_start)
                input_tag += 1
                regs[r] = node
            return node

        while i < len(instructions):
            inst = instructions[i]
            if leaders and inst.addr in leaders and inst.addr != block_start:
                break
            i += 1
            op = inst.opcode
            blk = block_start
            if op == "MOVI":
                regs[inst.rd] = g.add("const", value=inst.imm, block=blk)
            elif op == "MOV":
                regs[inst.rd] = g.add("copy", operands=(read(inst.rs1),), block=blk)
            elif op in ALU_REG_OPS:
                regs[inst.rd] = g.add(op, operands=(read(inst.rs1), read(inst.rs2)), block=blk)
            elif op in ALU_IMM_OPS:
                const = g.add("const", value=inst.imm, block=blk)
                regs[inst.rd] = g.add(op[:-1], operands=(read(inst.rs1), const), block=blk)
            elif op in ("LOAD", "LOADB"):
                addr = read(inst.rs1)
                if inst.imm:
                    const = g.add("const", value=inst.imm, block=blk)
                    addr = g.add("ADD", operands=(addr, const), block=blk)
                kind = "load4" if op == "LOAD" else "load1"
                regs[inst.rd] = g.add(kind, operands=(addr,), block=blk)
            elif op in ("STORE", "STOREB"):
                addr = read(inst.rs1)
                if inst.imm:
                    const = g.add("const", value=inst.imm, block=blk)
                    addr = g.add("ADD", operands=(addr, const), block=blk)
                value = read(inst.rs2)
                g.roots += [value, addr]
                g.store_values.append(value)
            elif op in TERMINATORS:
                if op in ("JMPR", "CALLR"):
                    g.roots.append(read(inst.rs1))
                break
        for r, node in regs.items():
            g.final_regs[(block_start, r)] = node
            g.roots.append(node)
    return g


# ---------------------------------------------------------------------------
# normalization


def _rot_of_shift_pair(g: Dfg, x, y) -> tuple[int, int] | None:
    """(source node, amount) when x|y form a rotate-by-constant pair."""
    a, b = g.nodes[x], g.nodes[y]
    if a.kind == "SHR" and b.kind == "SHL":
        a, b = b, a
    if a.kind != "SHL" or b.kind != "SHR":
        return None
    sa, sb = g.nodes[a.operands[1]], g.nodes[b.operands[1]]
    if sa.kind != "const" or sb.kind != "const":
        return None
    if a.operands[0] != b.operands[0]:
        return None
    if (sa.value + sb.value) % 32 != 0 or sa.value % 32 == 0:
        return None
    return a.operands[0], sa.value % 32


def _fold_op(kind: str, a: int, b: int) -> int:
    if kind == "ADD":
        return (a + b) & MASK32
    if kind == "SUB":
        return (a - b) & MASK32
    if kind == "AND":
        return a & b
    if kind == "OR":
        return a | b
    if kind == "XOR":
        return a ^ b
    if kind == "SHL":
        return (a << (b & 31)) & MASK32
    if kind == "SHR":
        return a >> (b & 31)
    s = b & 31  # ROL
    return ((a << s) | (a >> (32 - s))) & MASK32 if s else a


def _struct_hash(kind: str, value, child_hashes: tuple[int, ...]) -> int:
    if kind in COMMUTATIVE:
        child_hashes = tuple(sorted(child_hashes))
    label = value if kind == "const" else None  # input tags are not structural
    return hash((kind, label, child_hashes))


def normalize(g: Dfg) -> Dfg:
    """Fixpoint of copy elimination, constant folding, identity rewrites,
    shift-or rotation recovery, commutative ordering, and CSE."""
    current = g
    for _ in range(8):
        rebuilt, changed = _normalize_pass(current)
        current = rebuilt
        if not changed:
            break
    return current


def _normalize_pass(g: Dfg) -> tuple[Dfg, bool]:
    out = Dfg()
    memo: dict[tuple, int] = {}
    new_id: dict[int, int] = {}
    hashes: dict[int, int] = {}
    changed = False

    def emit(kind: str, value, operands: tuple[int, ...], block) -> int:
        key = (kind, value if kind in ("const", "input") else None, operands)
        cached = memo.get(key)
        if cached is not None:
            return cached
        nid = out.add(kind, value=value, operands=operands, block=block)
        memo[key] = nid
        h = _struct_hash(kind, value, tuple(hashes_out[o] for o in operands))
        hashes_out[nid] = h
        return nid

    hashes_out: dict[int, int] = {}

    for nid in _topo_order(g):
        node = g.nodes[nid]
        kind, value, block = node.kind, node.value, node.block
        ops = tuple(new_id[o] for o in node.operands)

        if kind == "copy":
            new_id[nid] = ops[0]
            changed = True
            continue

        if kind in COMMUTATIVE:
            # flatten same-kind children so associations vanish, fold the
            # constant part, drop neutral elements, recover rotations, and
            # order the members canonically by structural hash
            members: list[int] = []
            for o in ops:
                child = out.nodes[o]
                if child.kind == kind:
                    members.extend(child.operands)
                    changed = True
                else:
                    members.append(o)
            consts = [o for o in members if out.nodes[o].kind == "const"]
            rest = [o for o in members if out.nodes[o].kind != "const"]
            if len(consts) > 1:
                acc = out.nodes[consts[0]].value
                for o in consts[1:]:
                    acc = _fold_op(kind, acc, out.nodes[o].value)
                consts = [emit("const", acc, (), block)]
                changed = True
            if consts:
                c = out.nodes[consts[0]].value
                if kind == "AND" and c == 0:
                    new_id[nid] = emit("const", 0, (), block)
                    changed = True
                    continue
                neutral = MASK32 if kind == "AND" else 0
                if c == neutral and rest:
                    consts = []
                    changed = True
            members = rest + consts
            if not members:
                new_id[nid] = emit("const", MASK32 if kind == "AND" else 0, (), block)
                changed = True
                continue
            if kind in ("OR", "ADD", "XOR") and len(members) >= 2:
                rewritten = True
                while rewritten and len(members) >= 2:
                    rewritten = False
                    for i in range(len(members)):
                        for j in range(i + 1, len(members)):
                            pair = _rot_of_shift_pair(out, members[i], members[j])
                            if pair is not None:
                                src, amount = pair
                                const = emit("const", amount, (), block)
                                rol = emit("ROL", None, (src, const), block)
                                members = [m for k, m in enumerate(members) if k not in (i, j)]
                                members.append(rol)
                                changed = True
                                rewritten = True
                                break
                        if rewritten:
                            break
            if len(members) == 1:
                new_id[nid] = members[0]
                changed = True
                continue
            members.sort(key=lambda o: (hashes_out[o], o))
            new_id[nid] = emit(kind, None, tuple(members), block)
            continue

        if kind in ("SUB", "SHL", "SHR", "ROL"):
            a, b = ops
            na, nb = out.nodes[a], out.nodes[b]
            if na.kind == "const" and nb.kind == "const":
                new_id[nid] = emit("const", _fold_op(kind, na.value, nb.value), (), block)
                changed = True
                continue
            if nb.kind == "const" and (nb.value == 0 or (kind == "ROL" and nb.value % 32 == 0)):
                new_id[nid] = a
                changed = True
                continue
            # double rotation by constants
            if kind == "ROL" and nb.kind == "const" and na.kind == "ROL":
                inner_amt = out.nodes[na.operands[1]]
                if inner_amt.kind == "const":
                    total = (inner_amt.value + nb.value) % 32
                    if total == 0:
                        new_id[nid] = na.operands[0]
                    else:
                        const = emit("const", total, (), block)
                        new_id[nid] = emit("ROL", None, (na.operands[0], const), block)
                    changed = True
                    continue

        before = len(out.nodes)
        new_id[nid] = emit(kind, value, ops, block)
        if len(out.nodes) == before and kind not in ("const", "input"):
            changed = True  # merged with an existing node (CSE)

    for r in g.roots:
        out.roots.append(new_id[r])
    for key, node in g.final_regs.items():
        out.final_regs[key] = new_id[node]
    for v in g.store_values:
        out.store_values.append(new_id[v])
    return out, changed


def extract_subgraph(g: Dfg, roots: list[int]) -> Dfg:
    """The operand closure of the given roots as a standalone graph."""
    keep: list[int] = []
    seen: set[int] = set()
    stack = list(roots)
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        keep.append(n)
        stack.extend(g.nodes[n].operands)
    out = Dfg()
    mapping: dict[int, int] = {}
    for nid in _topo_order(g):
        if nid not in seen:
            continue
        node = g.nodes[nid]
        mapping[nid] = out.add(node.kind, value=node.value,
                               operands=tuple(mapping[o] for o in node.operands),
                               block=node.block)
    out.roots = [mapping[r] for r in roots]
    return out


def evaluate(g: Dfg, inputs: dict[int, int], mem=None) -> list[int]:
    """Concrete root values in root order; input slots read from their tag,
    loads from a deterministic memory function."""
    if mem is None:
        def mem(addr, size):
            return hash(("cell", addr)) & (MASK32 if size == 4 else 0xFF)
    memo: dict[int, int] = {}

    def val(n: int) -> int:
        if n in memo:
            return memo[n]
        node = g.nodes[n]
        if node.kind == "const":
            v = node.value
        elif node.kind == "input":
            v = inputs.get(node.value, 0)
        elif node.kind == "copy":
            v = val(node.operands[0])
        elif node.kind == "load4":
            v = mem(val(node.operands[0]), 4) & MASK32
        elif node.kind == "load1":
            v = mem(val(node.operands[0]), 1) & 0xFF
        else:
            v = val(node.operands[0])
            for o in node.operands[1:]:
                v = _fold_op(node.kind, v, val(o))
        memo[n] = v
        return v

    return [val(r) for r in g.roots]


# ---------------------------------------------------------------------------
# signatures and matching


@dataclass
class Signature:
    name: str
    graph: Dfg
    labeled_consts: set[int]  # node ids whose const value is a match label


@dataclass
class SignatureDb:
    signatures: dict[str, Signature] = field(default_factory=dict)
    composite: dict[str, list[str]] = field(default_factory=dict)
    expected_constants: tuple[int, ...] = tuple(SHA1_K) + tuple(SHA1_IV)


@dataclass
class MatchResult:
    matched_signature: str | None
    mapping: dict[str, int] = field(default_factory=dict)  # "sig:node" -> candidate node
    matched_blocks: set[int] = field(default_factory=set)
    score: float = 0.0
    budget_exceeded: bool = False


def _label_policy(sig: Dfg) -> set[int]:
    """Constants that must match by value: SHA-1 round/IV constants and
    shift amounts; everything else (addresses, offsets, bounds) is wildcard."""
    fingerprint = set(SHA1_K) | set(SHA1_IV)
    labeled: set[int] = set()
    for node in sig.nodes.values():
        if node.kind in ("SHL", "SHR", "ROL"):
            amt = sig.nodes[node.operands[1]]
            if amt.kind == "const":
                labeled.add(amt.id)
        if node.kind == "const" and node.value in fingerprint:
            labeled.add(node.id)
    return labeled


class _Embedder:
    def __init__(self, sig: Signature, candidate: Dfg, budget: int = MATCH_BUDGET):
        self.sig = sig
        self.cand = candidate
        self.budget = budget
        self.attempts = 0
        self.by_kind: dict[str, list[int]] = {}
        for n in candidate.nodes.values():
            self.by_kind.setdefault(n.kind, []).append(n.id)

    def embed(self) -> dict[int, int] | None:
        roots = sorted(set(self.sig.graph.roots))
        return self._match_roots(roots, 0, {}, set())

    def _match_roots(self, roots, idx, mapping, used):
        if idx == len(roots):
            return dict(mapping)
        s = roots[idx]
        for c in self.by_kind.get(self.sig.graph.nodes[s].kind, ()):
            trial = dict(mapping)
            trial_used = set(used)
            if self._try(s, c, trial, trial_used):
                result = self._match_roots(roots, idx + 1, trial, trial_used)
                if result is not None:
                    return result
        return None

    def _try(self, s: int, c: int, mapping: dict, used: set) -> bool:
        self.attempts += 1
        if self.attempts > self.budget:
            raise MatchBudgetExceeded()
        bound = mapping.get(s)
        if bound is not None:
            return bound == c
        if c in used:
            return False
        sn = self.sig.graph.nodes[s]
        cn = self.cand.nodes[c]
        if sn.kind != cn.kind:
            return False
        if sn.kind == "const" and s in self.sig.labeled_consts and sn.value != cn.value:
            return False
        if len(sn.operands) != len(cn.operands):
            return False
        mapping[s] = c
        used.add(c)
        if self._operands(sn, cn, mapping, used):
            return True
        del mapping[s]
        used.discard(c)
        return False

    def _operands(self, sn: DfgNode, cn: DfgNode, mapping, used) -> bool:
        if not sn.operands:
            return True
        if sn.kind in COMMUTATIVE:
            # constants and larger subtrees first: they prune fastest
            order = sorted(
                sn.operands,
                key=lambda s: (self.sig.graph.nodes[s].kind != "const",
                               -len(self.sig.graph.nodes[s].operands)),
            )
            return self._assign(order, list(cn.operands), mapping, used)
        snapshot = dict(mapping), set(used)
        for so, co in zip(sn.operands, cn.operands):
            if not self._try(so, co, mapping, used):
                mapping.clear()
                mapping.update(snapshot[0])
                used.clear()
                used.update(snapshot[1])
                return False
        return True

    def _assign(self, sig_ops: list[int], cand_ops: list[int], mapping, used) -> bool:
        """Backtracking multiset assignment of commutative operands."""
        if not sig_ops:
            return True
        s0, tail = sig_ops[0], sig_ops[1:]
        for i, c in enumerate(cand_ops):
            snapshot = dict(mapping), set(used)
            if self._try(s0, c, mapping, used):
                if self._assign(tail, cand_ops[:i] + cand_ops[i + 1:], mapping, used):
                    return True
            mapping.clear()
            mapping.update(snapshot[0])
            used.clear()
            used.update(snapshot[1])
        return False


def match_signature(candidate: Dfg, db: SignatureDb) -> MatchResult:
    """Best embedding of the reference signatures into a normalized graph.

    Composite signatures match when all their components embed and every
    expected constant appears in the candidate; a blown backtracking budget
    counts as no match.
    """
    best = MatchResult(None)
    cand_consts = candidate.const_values()
    for name, parts in db.composite.items():
        total_nodes = sum(len(db.signatures[p].graph.nodes) for p in parts)
        mapping: dict[str, int] = {}
        blocks: set[int] = set()
        matched_nodes = 0
        complete = True
        budget_hit = False
        for part in parts:
            sig = db.signatures[part]
            try:
                m = _Embedder(sig, candidate).embed()
            except MatchBudgetExceeded:
                m, budget_hit = None, True
            if m is None:
                complete = False
                continue
            matched_nodes += len(sig.graph.nodes)
            for sn, cn in m.items():
                mapping[f"{part}:{sn}"] = cn
                blk = candidate.nodes[cn].block
                if blk is not None:
                    blocks.add(blk)
        constants_ok = all(c in cand_consts for c in db.expected_constants)
        score = (matched_nodes / total_nodes) if total_nodes else 0.0
        if complete and constants_ok:
            return MatchResult(name, mapping, blocks, 1.0, budget_hit)
        if score > best.score:
            best = MatchResult(None, mapping, blocks, score, budget_hit)
    for name, sig in db.signatures.items():
        try:
            m = _Embedder(sig, candidate).embed()
        except MatchBudgetExceeded:
            best.budget_exceeded = True
            continue
        if m is not None:
            blocks = {candidate.nodes[c].block for c in m.values()} - {None}
            return MatchResult(name, {f"{name}:{s}": c for s, c in m.items()}, blocks, 1.0)
    return best


def _decode_body(image, label: str) -> list[Instruction]:
    """Instructions of the straight-line block starting at a label."""
    addr = image.symbols[label]
    out = []
    code = image.code
    while True:
        off = addr - LOAD_BASE
        inst = decode(code[off : off + INSTR_SIZE], addr)
        out.append(inst)
        if inst.opcode in TERMINATORS:
            return out
        addr += INSTR_SIZE


def make_reference_signatures() -> SignatureDb:
    """Round, schedule, and composite compression signatures derived from the
    canonical implementation; deterministic."""
    image = assemble(reference_hash_source())
    db = SignatureDb()
    canon = CANON_ROUND_REGS
    names = ("sha1-round-ch", "sha1-round-parity-1", "sha1-round-maj", "sha1-round-parity-2")
    for name, label in zip(names, ROUND_BODY_LABELS):
        body = _decode_body(image, label)
        g = build_dfg(body)
        start = body[0].addr
        roots = [g.final_regs[(start, canon["a"])], g.final_regs[(start, canon["c"])]]
        sig_graph = normalize(extract_subgraph(g, roots))
        db.signatures[name] = Signature(name, sig_graph, _label_policy(sig_graph))
    sched = build_dfg(_decode_body(image, SCHED_BODY_LABEL))
    sig_graph = normalize(extract_subgraph(sched, [sched.store_values[0]]))
    db.signatures["sha1-schedule"] = Signature("sha1-schedule", sig_graph,
                                               _label_policy(sig_graph))
    db.composite["sha1-compression"] = list(names) + ["sha1-schedule"]
    return db


CANON_ROUND_REGS = {"a": 0, "c": 2}


def export_db(db: SignatureDb, path) -> None:
    payload = {
        "expected_constants": [f"{c:#010x}" for c in db.expected_constants],
        "composite": db.composite,
        "signatures": {
            name: {
                "nodes": [
                    {"id": n.id, "kind": n.kind, "value": n.value,
                     "operands": list(n.operands)}
                    for n in sig.graph.nodes.values()
                ],
                "roots": sorted(set(sig.graph.roots)),
                "labeled_consts": sorted(sig.labeled_consts),
            }
            for name, sig in db.signatures.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
