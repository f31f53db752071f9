"""Control-flow-graph recovery: recursive disassembly plus indirect-jump
resolution through the symbolic engine.

Blocks are re-derived from the final leader set, so later-discovered targets
that land mid-block split cleanly.  RET successors come from a call-site
summary rather than all-returns-to-all-sites.  Indirect terminators whose
target set cannot be bounded are reported in `unresolved`, never guessed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .isa import (
    INSTR_SIZE,
    LOAD_BASE,
    AddressRange,
    FirmwareImage,
    Instruction,
    IsaError,
    decode,
)
from .symex import ExplorationConfig, Explorer, solve

TERMINATOR_KINDS = {
    "JMP": "jump",
    "JMPR": "indirect",
    "CALL": "call",
    "CALLR": "indirect_call",
    "RET": "ret",
    "HALT": "halt",
    "BEQ": "branch",
    "BNE": "branch",
    "BLTU": "branch",
    "BGEU": "branch",
}


@dataclass
class BasicBlock:
    start: int
    instructions: list[Instruction]
    terminator: str  # fallthrough | jump | branch | call | indirect | ret | halt

    @property
    def length(self) -> int:
        return len(self.instructions) * INSTR_SIZE

    @property
    def end(self) -> int:
        return self.start + self.length

    @property
    def last(self) -> Instruction:
        return self.instructions[-1]

    def __repr__(self):
        return f"BasicBlock(0x{self.start:08x}, {len(self.instructions)} instrs, {self.terminator})"


@dataclass
class Cfg:
    entry: int
    nodes: dict[int, BasicBlock] = field(default_factory=dict)
    edges: set[tuple[int, int, str]] = field(default_factory=set)
    unresolved: set[int] = field(default_factory=set)
    indirect_targets: dict[int, tuple[int, ...]] = field(default_factory=dict)
    block_function: dict[int, int] = field(default_factory=dict)
    functions: dict[int, set[int]] = field(default_factory=dict)
    call_sites: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    decode_errors: list[tuple[int, str]] = field(default_factory=list)

    def successors(self, start: int, kinds: tuple[str, ...] | None = None):
        for src, dst, kind in self.edges:
            if src == start and (kinds is None or kind in kinds):
                yield dst, kind

    def block_at(self, addr: int) -> BasicBlock | None:
        """Block whose byte range contains addr."""
        for b in self.nodes.values():
            if b.start <= addr < b.end:
                return b
        return None

    def function_closure(self, fentry: int) -> set[int]:
        """Function entries reachable from fentry through call edges."""
        out = {fentry}
        work = [fentry]
        while work:
            f = work.pop()
            for b in self.functions.get(f, ()):
                blk = self.nodes.get(b)
                if blk is None:
                    continue
                for dst, kind in self.successors(b, ("call",)):
                    if dst not in out:
                        out.add(dst)
                        work.append(dst)
        return out

    def closure_blocks(self, fentry: int) -> set[int]:
        blocks: set[int] = set()
        for f in self.function_closure(fentry):
            blocks |= self.functions.get(f, set())
        return blocks


def recover_cfg(image: FirmwareImage, config: ExplorationConfig | None = None) -> Cfg:
    """Recursive-traversal disassembly from entry until no new exits appear."""
    config = config or ExplorationConfig()
    code_end = LOAD_BASE + len(image.code)
    insts: dict[int, Instruction] = {}
    bad_slots: dict[int, str] = {}
    for off in range(0, len(image.code), INSTR_SIZE):
        addr = LOAD_BASE + off
        try:
            insts[addr] = decode(image.code[off : off + INSTR_SIZE], addr)
        except IsaError as exc:
            bad_slots[addr] = str(exc)

    cfg = Cfg(entry=image.entry)
    decode_errors: dict[int, str] = {}
    resolved: dict[int, tuple[int, ...]] = {}  # terminator instr addr -> targets
    unresolved_pcs: set[int] = set()

    def scan_leaders() -> set[int]:
        """Fixpoint leader discovery given the current indirect resolutions."""
        leaders = {image.entry}
        work = [image.entry]
        seen_scan: set[int] = set()
        while work:
            start = work.pop()
            if start in seen_scan:
                continue
            seen_scan.add(start)
            pc = start
            while True:
                inst = insts.get(pc)
                if inst is None:
                    decode_errors.setdefault(
                        pc, bad_slots.get(pc, "control flow leaves the code section")
                    )
                    break
                op = inst.opcode
                if op in TERMINATOR_KINDS:
                    targets: list[int] = []
                    if op == "JMP":
                        targets = [inst.imm]
                    elif op in ("BEQ", "BNE", "BLTU", "BGEU"):
                        targets = [inst.imm, pc + INSTR_SIZE]
                    elif op == "CALL":
                        targets = [inst.imm, pc + INSTR_SIZE]
                    elif op == "CALLR":
                        targets = [pc + INSTR_SIZE] + list(resolved.get(pc, ()))
                    elif op == "JMPR":
                        targets = list(resolved.get(pc, ()))
                    for t in targets:
                        if t not in leaders:
                            leaders.add(t)
                            work.append(t)
                    break
                pc += INSTR_SIZE
                if pc in leaders:
                    break
        return leaders

    # iterate: discover, resolve indirects, repeat until stable
    for _ in range(8):
        leaders = scan_leaders()
        pending = []
        for leader in leaders:
            pc = leader
            while pc in insts:
                op = insts[pc].opcode
                if op in TERMINATOR_KINDS:
                    if op in ("JMPR", "CALLR") and pc not in resolved and pc not in unresolved_pcs:
                        pending.append(pc)
                    break
                pc += INSTR_SIZE
                if pc in leaders:
                    break
        if not pending:
            break
        for pc in pending:
            targets = _resolve_indirect_targets(image, pc, insts[pc], config)
            if targets is None:
                unresolved_pcs.add(pc)
            else:
                resolved[pc] = tuple(sorted(targets))

    leaders = scan_leaders()

    # materialize blocks from the final leader set
    for leader in sorted(leaders):
        if leader not in insts:
            continue
        block_insts = []
        pc = leader
        terminator = "fallthrough"
        while True:
            inst = insts.get(pc)
            if inst is None:
                terminator = "halt"
                break
            block_insts.append(inst)
            if inst.opcode in TERMINATOR_KINDS:
                terminator = TERMINATOR_KINDS[inst.opcode]
                if terminator == "indirect_call":
                    terminator = "indirect"
                break
            pc += INSTR_SIZE
            if pc in leaders or pc >= code_end:
                break
        if block_insts:
            cfg.nodes[leader] = BasicBlock(leader, block_insts, terminator)

    # edges
    for block in cfg.nodes.values():
        last = block.last
        op = last.opcode
        nxt = block.end
        if op == "JMP":
            cfg.edges.add((block.start, last.imm, "jump"))
        elif op in ("BEQ", "BNE", "BLTU", "BGEU"):
            cfg.edges.add((block.start, last.imm, "branch"))
            cfg.edges.add((block.start, nxt, "fallthrough"))
        elif op == "CALL":
            cfg.edges.add((block.start, last.imm, "call"))
            cfg.edges.add((block.start, nxt, "fallthrough"))
            cfg.call_sites.setdefault(last.imm, []).append((last.addr, nxt))
        elif op == "CALLR":
            cfg.edges.add((block.start, nxt, "fallthrough"))
            if last.addr in resolved:
                for t in resolved[last.addr]:
                    cfg.edges.add((block.start, t, "call"))
                    cfg.call_sites.setdefault(t, []).append((last.addr, nxt))
                cfg.indirect_targets[last.addr] = resolved[last.addr]
            else:
                cfg.unresolved.add(block.start)
        elif op == "JMPR":
            if last.addr in resolved:
                for t in resolved[last.addr]:
                    cfg.edges.add((block.start, t, "indirect"))
                cfg.indirect_targets[last.addr] = resolved[last.addr]
            else:
                cfg.unresolved.add(block.start)
        elif op == "RET":
            pass  # ret edges need the call summary; added below
        elif op == "HALT":
            pass
        elif block.terminator == "fallthrough" and nxt in cfg.nodes:
            cfg.edges.add((block.start, nxt, "fallthrough"))

    # edges must stay within the recovered node set; a target outside it means
    # control flow into undecodable territory and gets flagged instead
    for src, dst, kind in sorted(cfg.edges):
        if dst not in cfg.nodes:
            cfg.edges.discard((src, dst, kind))
            decode_errors.setdefault(dst, f"edge target 0x{dst:08x} is not decodable code")

    _assign_functions(cfg)
    _add_ret_edges(cfg)
    cfg.decode_errors = sorted(decode_errors.items())
    return cfg


def _assign_functions(cfg: Cfg) -> None:
    """Function membership: blocks reachable from a function entry without
    crossing a call edge.  Call targets root new functions."""
    roots = [cfg.entry]
    seen_roots = {cfg.entry}
    while roots:
        fentry = roots.pop()
        members = cfg.functions.setdefault(fentry, set())
        work = [fentry]
        while work:
            b = work.pop()
            if b in members or b not in cfg.nodes:
                continue
            members.add(b)
            cfg.block_function.setdefault(b, fentry)
            for dst, kind in cfg.successors(b):
                if kind == "call":
                    if dst not in seen_roots:
                        seen_roots.add(dst)
                        roots.append(dst)
                elif kind != "ret":
                    work.append(dst)


def _add_ret_edges(cfg: Cfg) -> None:
    for fentry, members in cfg.functions.items():
        sites = cfg.call_sites.get(fentry, [])
        if not sites:
            continue
        for b in members:
            blk = cfg.nodes.get(b)
            if blk is not None and blk.terminator == "ret":
                for _, return_site in sites:
                    if return_site in cfg.nodes:
                        cfg.edges.add((b, return_site, "ret"))


RESOLVE_ARRIVAL_WINDOW = 8192


def _resolve_indirect_targets(image: FirmwareImage, pc: int, inst: Instruction,
                              config: ExplorationConfig) -> set[int] | None:
    """Concrete target set of the indirect terminator at pc, or None.

    Explores from the image entry (fresh symbolic registers, image-initial
    memory) to the terminator and enumerates the target register under the
    path constraints.  First-arrival pruning is used when no resolved target
    can flow back to the terminator; otherwise paths continue through it and
    later arrivals are unioned in, bounded by the unroll bound and an
    arrival window.  Anything short of that coverage yields None.
    """
    explorer = Explorer(image, config)
    outcome = explorer.explore(image.entry, collect_at={pc}, stop_on_collect=True)
    targets = _solve_arrivals(outcome.collected, inst, config)
    if targets is None or not outcome.collected:
        return None
    if outcome.exhausted and not _may_cycle_back(image, pc, targets):
        return targets
    # the terminator sits on a cycle: rerun without pruning, collecting every
    # arrival up to the unroll bound per path
    outcome = explorer.explore(
        image.entry, collect_at={pc}, stop_on_collect=False,
        collect_cap=config.loop_bound + 1, collect_window=RESOLVE_ARRIVAL_WINDOW,
    )
    if not outcome.collected:
        return None
    if outcome.truncations - {"collect_cap", "collect_window"}:
        return None
    return _solve_arrivals(outcome.collected, inst, config)


def _solve_arrivals(collected, inst: Instruction, config: ExplorationConfig) -> set[int] | None:
    targets: set[int] = set()
    for _, regs, constraints, _ in collected:
        value = regs[inst.rs1]
        if isinstance(value, int):
            targets.add(value)
            continue
        res = solve(constraints, value, limit=config.solution_cap)
        if not (res.sat and res.complete):
            return None
        targets.update(res.values)
    return targets


def _may_cycle_back(image: FirmwareImage, pc: int, targets: set[int]) -> bool:
    """Conservative flow walk from the targets: can execution reach pc again?

    Follows direct edges, descends into calls, and routes RET to every call
    fallthrough seen so far; any other indirect terminator on the way counts
    as a potential cycle.
    """
    insts = {i.addr: i for i in image.instructions()}
    work = list(targets)
    seen: set[int] = set()
    return_sites: set[int] = set()
    while work:
        cur = work.pop()
        if cur in seen or cur not in insts:
            continue
        seen.add(cur)
        if cur == pc:
            return True
        inst = insts[cur]
        op = inst.opcode
        if op == "JMP":
            work.append(inst.imm)
        elif op in ("BEQ", "BNE", "BLTU", "BGEU"):
            work += [inst.imm, cur + INSTR_SIZE]
        elif op == "CALL":
            site = cur + INSTR_SIZE
            if site not in return_sites:
                return_sites.add(site)
                seen.clear()  # new return edge invalidates previous RET walks
            work += [inst.imm, site]
        elif op == "RET":
            work += list(return_sites)
        elif op in ("JMPR", "CALLR"):
            return True
        elif op != "HALT":
            work.append(cur + INSTR_SIZE)
    return False


def resolve_indirect(image: FirmwareImage, cfg: Cfg, block: BasicBlock,
                     config: ExplorationConfig | None = None) -> set[int]:
    """Target set for an indirect-terminator block; empty set when unresolved
    (the block is recorded in cfg.unresolved)."""
    if block.terminator != "indirect":
        raise ValueError(f"block at 0x{block.start:08x} is not indirect")
    config = config or ExplorationConfig()
    targets = _resolve_indirect_targets(image, block.last.addr, block.last, config)
    if targets is None:
        cfg.unresolved.add(block.start)
        return set()
    cfg.unresolved.discard(block.start)
    return targets


def reachable_blocks(cfg: Cfg) -> list[AddressRange]:
    """Address ranges of every recovered block, ordered by start."""
    return [AddressRange(b.start, b.length) for b in
            sorted(cfg.nodes.values(), key=lambda b: b.start)]


def to_dot(cfg: Cfg) -> str:
    lines = ["digraph cfg {", "  node [shape=box, fontname=monospace];"]
    for start in sorted(cfg.nodes):
        block = cfg.nodes[start]
        style = ' style=dashed' if start in cfg.unresolved else ""
        lines.append(f'  "0x{start:08x}" [label="0x{start:08x}\\n{len(block.instructions)} instr"{style}];')
    for src, dst, kind in sorted(cfg.edges):
        lines.append(f'  "0x{src:08x}" -> "0x{dst:08x}" [label="{kind}"];')
    lines.append("}")
    return "\n".join(lines)
