"""Interprocedural backward slicing and path-sensitive reaching definitions.

The slice is computed over register def-use chains (flow-sensitive, context-
insensitive across the call summary) plus memory dependencies resolved
through a constant-propagation pass; loads whose address stays unknown
depend on every store.  The slice is a deliberate over-approximation; the
per-path reaching-definition replay is what restores precision downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cfg import Cfg
from .isa import ALU_IMM_OPS, ALU_REG_OPS, MASK32, Instruction

TOP = object()  # unknown constant


class DataflowError(Exception):
    pass


class IncompleteCfg(DataflowError):
    pass


class InvalidPath(DataflowError):
    pass


@dataclass(frozen=True)
class SliceCriterion:
    instr_addr: int
    operand: str = "value"  # "value" = the stored register of the TPM write


@dataclass
class Slice:
    criterion: SliceCriterion
    instructions: set[int] = field(default_factory=set)
    entry_functions: set[int] = field(default_factory=set)


def _reg_uses(inst: Instruction) -> tuple[int, ...]:
    op = inst.opcode
    if op == "MOV" or op in ALU_IMM_OPS or op in ("LOAD", "LOADB", "JMPR"):
        return (inst.rs1,)
    if op in ALU_REG_OPS:
        return (inst.rs1, inst.rs2)
    if op in ("STORE", "STOREB"):
        return (inst.rs1, inst.rs2)
    if op in ("BEQ", "BNE", "BLTU", "BGEU"):
        return (inst.rs1, inst.rs2)
    if op in ("CALL", "RET"):
        return (7,)
    if op == "CALLR":
        return (inst.rs1, 7)
    return ()


def _reg_def(inst: Instruction) -> int | None:
    op = inst.opcode
    if op in ("MOVI", "MOV", "LOAD", "LOADB") or op in ALU_REG_OPS or op in ALU_IMM_OPS:
        return inst.rd
    if op in ("CALL", "CALLR", "RET"):
        return 7
    return None


def _flow_edges(cfg: Cfg):
    """Dataflow successor map: call sites flow into callees, returns flow to
    the matched return sites, and the call fallthrough link is skipped."""
    succs: dict[int, list[int]] = {b: [] for b in cfg.nodes}
    call_blocks = {b for b in cfg.nodes if cfg.nodes[b].terminator == "call"
                   or (cfg.nodes[b].terminator == "indirect"
                       and cfg.nodes[b].last.opcode == "CALLR")}
    for src, dst, kind in cfg.edges:
        if src not in succs:
            continue
        if kind == "fallthrough" and src in call_blocks:
            continue  # value flow goes through the callee and back via ret
        succs[src].append(dst)
    return succs


def _const_transfer(inst: Instruction, regs: list):
    op = inst.opcode
    if op == "MOVI":
        regs[inst.rd] = inst.imm
        return
    if op == "MOV":
        regs[inst.rd] = regs[inst.rs1]
        return
    if op in ALU_REG_OPS:
        a, b = regs[inst.rs1], regs[inst.rs2]
        regs[inst.rd] = _fold(op, a, b)
        return
    if op in ALU_IMM_OPS:
        regs[inst.rd] = _fold(op[:-1], regs[inst.rs1], inst.imm)
        return
    if op in ("LOAD", "LOADB"):
        regs[inst.rd] = TOP
        return
    if op in ("CALL", "CALLR", "RET"):
        regs[7] = TOP  # stack pointer shifts are irrelevant to data addresses


def _fold(op: str, a, b):
    if a is TOP or b is TOP or a is None or b is None:
        return TOP
    if op == "ADD":
        return (a + b) & MASK32
    if op == "SUB":
        return (a - b) & MASK32
    if op == "AND":
        return a & b
    if op == "OR":
        return a | b
    if op == "XOR":
        return a ^ b
    if op == "SHL":
        return (a << (b & 31)) & MASK32
    if op == "SHR":
        return a >> (b & 31)
    if op == "ROL":
        s = b & 31
        return ((a << s) | (a >> (32 - s))) & MASK32 if s else a
    return TOP


def _join(a, b):
    """Constant-lattice join; returns the first argument when both agree."""
    if a is None:
        return b
    if b is None:
        return a
    if a is TOP or b is TOP or a != b:
        return TOP
    return a


class ProgramFacts:
    """Whole-program constant and reaching-definition facts over a cfg."""

    def __init__(self, cfg: Cfg):
        self.cfg = cfg
        self.succs = _flow_edges(cfg)
        self.preds: dict[int, list[int]] = {b: [] for b in cfg.nodes}
        for src, dsts in self.succs.items():
            for dst in dsts:
                self.preds.setdefault(dst, []).append(src)
        self.store_addr: dict[int, tuple] = {}  # store instr -> (addr|TOP, size)
        self.load_addr: dict[int, tuple] = {}
        self._run_const_analysis()
        self._rd_in: dict[int, dict[int, frozenset]] = {}
        self._run_reaching_defs()

    def _run_const_analysis(self) -> None:
        cfg = self.cfg
        entry_state: dict[int, list] = {b: [None] * 8 for b in cfg.nodes}
        work = [cfg.entry]
        on_work = {cfg.entry}
        while work:
            b = work.pop()
            on_work.discard(b)
            regs = list(entry_state[b])
            for inst in cfg.nodes[b].instructions:
                if inst.opcode in ("LOAD", "LOADB", "STORE", "STOREB"):
                    base = regs[inst.rs1]
                    addr = TOP if base is TOP or base is None else (base + inst.imm) & MASK32
                    size = 4 if inst.opcode in ("LOAD", "STORE") else 1
                    table = self.load_addr if inst.opcode in ("LOAD", "LOADB") else self.store_addr
                    prev = table.get(inst.addr)
                    merged = addr if prev is None else _join(prev[0], addr)
                    table[inst.addr] = (merged, size)
                _const_transfer(inst, regs)
            for dst in self.succs.get(b, ()):
                target = entry_state[dst]
                changed = False
                for i in range(8):
                    joined = _join(target[i], regs[i])
                    if joined is not target[i]:
                        target[i] = joined
                        changed = True
                if changed and dst not in on_work:
                    work.append(dst)
                    on_work.add(dst)

    def _run_reaching_defs(self) -> None:
        cfg = self.cfg
        gen: dict[int, dict[int, frozenset]] = {}
        kill: dict[int, set[int]] = {}
        for b, block in cfg.nodes.items():
            g: dict[int, frozenset] = {}
            for inst in block.instructions:
                rd = _reg_def(inst)
                if rd is not None:
                    g[rd] = frozenset((inst.addr,))
            gen[b] = g
            kill[b] = set(g)
        rd_in: dict[int, dict[int, frozenset]] = {
            b: ({r: frozenset(("init",)) for r in range(8)} if b == cfg.entry else {})
            for b in cfg.nodes
        }
        work = list(cfg.nodes)
        on_work = set(work)
        while work:
            b = work.pop()
            on_work.discard(b)
            current = rd_in[b]
            out: dict[int, frozenset] = dict(current)
            for r, defs in gen[b].items():
                out[r] = defs
            for dst in self.succs.get(b, ()):
                target = rd_in[dst]
                changed = False
                for r, defs in out.items():
                    merged = target.get(r, frozenset()) | defs
                    if merged != target.get(r, frozenset()):
                        target[r] = merged
                        changed = True
                if changed and dst not in on_work:
                    work.append(dst)
                    on_work.add(dst)
        self._rd_in = rd_in

    def reg_defs_at(self, block_start: int, instr_addr: int, reg: int) -> frozenset:
        """Definitions of reg reaching the given instruction."""
        defs = dict(self._rd_in.get(block_start, {}))
        for inst in self.cfg.nodes[block_start].instructions:
            if inst.addr == instr_addr:
                return defs.get(reg, frozenset(("init",)))
            rd = _reg_def(inst)
            if rd is not None:
                defs[rd] = frozenset((inst.addr,))
        raise IncompleteCfg(f"instruction 0x{instr_addr:08x} not in block 0x{block_start:08x}")

    def mem_dep_stores(self, load_addr, size: int) -> set[int]:
        """Stores that may define the bytes a load reads."""
        out: set[int] = set()
        for saddr, (target, ssize) in self.store_addr.items():
            if target is TOP or load_addr is TOP:
                out.add(saddr)
            elif target < load_addr + size and load_addr < target + ssize:
                out.add(saddr)
        return out


def backward_slice(image, cfg: Cfg, criterion: SliceCriterion,
                   facts: ProgramFacts | None = None) -> Slice:
    """Transitive closure over data and address dependencies, interprocedural.

    Raises IncompleteCfg when the criterion instruction is not part of the
    recovered graph.
    """
    home = cfg.block_at(criterion.instr_addr)
    if home is None:
        raise IncompleteCfg(f"criterion 0x{criterion.instr_addr:08x} unreachable in cfg")
    facts = facts or ProgramFacts(cfg)

    instr_block: dict[int, int] = {}
    instr_by_addr: dict[int, Instruction] = {}
    for b, block in cfg.nodes.items():
        for inst in block.instructions:
            instr_block[inst.addr] = b
            instr_by_addr[inst.addr] = inst

    result = Slice(criterion)
    result.instructions.add(criterion.instr_addr)
    crit = instr_by_addr[criterion.instr_addr]

    # seed demands: the stored value and the address computation
    work: list[tuple[int, int]] = []  # (instr_addr, reg)
    seen: set[tuple[int, int]] = set()

    def demand(at: int, reg: int) -> None:
        key = (at, reg)
        if key not in seen:
            seen.add(key)
            work.append(key)

    for reg in _reg_uses(crit):
        demand(criterion.instr_addr, reg)

    while work:
        at, reg = work.pop()
        block = instr_block.get(at)
        if block is None:
            continue
        for d in facts.reg_defs_at(block, at, reg):
            if d == "init" or d in result.instructions:
                continue
            result.instructions.add(d)
            dinst = instr_by_addr[d]
            for r in _reg_uses(dinst):
                demand(d, r)
            if dinst.opcode in ("LOAD", "LOADB"):
                addr, size = facts.load_addr.get(d, (TOP, 4))
                for saddr in facts.mem_dep_stores(addr, size):
                    if saddr not in result.instructions:
                        result.instructions.add(saddr)
                        sinst = instr_by_addr[saddr]
                        for r in _reg_uses(sinst):
                            demand(saddr, r)

    for addr in result.instructions:
        b = instr_block.get(addr)
        if b is not None and b in cfg.block_function:
            result.entry_functions.add(cfg.block_function[b])
    return result


# ---------------------------------------------------------------------------
# path-sensitive reaching definitions


@dataclass
class PathStep:
    index: int
    instr: Instruction
    mem_addr: int | None = None  # resolved address for loads/stores
    use_defs: dict = field(default_factory=dict)  # location -> frozenset of defs


@dataclass
class DefUseMap:
    steps: list[PathStep]
    uses: dict = field(default_factory=dict)  # (step index, location) -> defs

    def defs_for(self, index: int, location) -> frozenset:
        return self.uses.get((index, location), frozenset(("init",)))


def reaching_defs(cfg: Cfg, path: list[int], location=None,
                  init_regs: list[int | None] | None = None) -> DefUseMap:
    """Gen/kill replay along a concrete block path.

    Locations are registers ("reg", n) and memory bytes ("mem", addr); store
    addresses are resolved by constant folding over the replayed registers,
    seeded from init_regs.  Definition sites are path step indices (the same
    instruction may define a location several times around a loop); "init"
    marks state that predates the path.  A store whose address stays unknown
    reaches every later load conservatively.
    """
    if not path:
        raise InvalidPath("empty path")
    for b in path:
        if b not in cfg.nodes:
            raise InvalidPath(f"block 0x{b:08x} not in cfg")
    edges = {(s, d) for s, d, _ in cfg.edges}
    for a, b in zip(path, path[1:]):
        if (a, b) not in edges:
            raise InvalidPath(f"no edge 0x{a:08x} -> 0x{b:08x}")

    regs: list = list(init_regs) if init_regs is not None else [None] * 8
    reg_defs: list[frozenset] = [frozenset(("init",))] * 8
    mem_defs: dict[int, frozenset] = {}
    unknown_stores: set[int] = set()
    out = DefUseMap(steps=[])
    index = 0

    for b in path:
        for inst in cfg.nodes[b].instructions:
            step = PathStep(index, inst)
            op = inst.opcode
            for r in _reg_uses(inst):
                step.use_defs[("reg", r)] = reg_defs[r]
                out.uses[(index, ("reg", r))] = reg_defs[r]
            if op in ("LOAD", "LOADB", "STORE", "STOREB"):
                size = 4 if op in ("LOAD", "STORE") else 1
                base = regs[inst.rs1]
                addr = None if base is None else (base + inst.imm) & MASK32
                step.mem_addr = addr
                if op in ("LOAD", "LOADB"):
                    if addr is not None:
                        for i in range(size):
                            defs = mem_defs.get(addr + i, frozenset(("init",)))
                            defs |= frozenset(unknown_stores)
                            step.use_defs[("mem", addr + i)] = defs
                            out.uses[(index, ("mem", addr + i))] = defs
                    else:
                        defs = frozenset(unknown_stores) | frozenset(("init",))
                        step.use_defs[("mem", None)] = defs
                        out.uses[(index, ("mem", None))] = defs
                else:
                    if addr is not None:
                        for i in range(size):
                            mem_defs[addr + i] = frozenset((index,))
                    else:
                        unknown_stores.add(index)
            rd = _reg_def(inst)
            if rd is not None:
                reg_defs[rd] = frozenset((index,))
            _const_transfer(inst, regs)
            out.steps.append(step)
            index += 1

    if location is not None:
        out.uses = {k: v for k, v in out.uses.items() if k[1] == location}
    return out
