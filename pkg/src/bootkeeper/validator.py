"""Property validation pipeline: TPM-write discovery, hash authenticity,
measurement atomicity, and measurement completeness, with an evidence-bearing
JSON report.

Later stages depend on earlier results (P2 needs P1's write events, P3/P4
need the identified hash), so a failed prerequisite downgrades dependents to
"inconclusive" while the overall verdict is already "invalid".
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

from . import cryptoid, dataflow, symex
from .cfg import Cfg, reachable_blocks, recover_cfg
from .dataflow import IncompleteCfg, ProgramFacts, SliceCriterion, backward_slice, reaching_defs
from .isa import (
    AddressRange,
    FirmwareImage,
    IsaError,
    load_image,
    normalize_ranges,
    subtract_ranges,
)
from .machine import Machine
from .symex import AnalysisTimeout, ExplorationConfig, TpmWriteEvent, solve

AUTHENTIC_SIGNATURE = "sha1-compression"


class ValidatorError(Exception):
    pass


class UnresolvedArguments(ValidatorError):
    pass


class PathBudgetExceeded(ValidatorError):
    pass


@dataclass
class AnalysisConfig:
    timeout_seconds: float = 600.0
    max_states: int = 512
    max_depth: int = 4_000_000
    loop_bound: int = 2
    solution_cap: int = 64
    path_cap: int = 64
    max_steps: int = 3_000_000

    def explore_config(self, remaining: float) -> ExplorationConfig:
        return ExplorationConfig(
            timeout_seconds=max(remaining, 0.001),
            max_states=self.max_states,
            max_depth=self.max_depth,
            loop_bound=self.loop_bound,
            solution_cap=self.solution_cap,
        )

    def echo(self) -> dict:
        return {
            "timeout_seconds": self.timeout_seconds,
            "max_states": self.max_states,
            "max_depth": self.max_depth,
            "loop_bound": self.loop_bound,
            "solution_cap": self.solution_cap,
            "path_cap": self.path_cap,
            "max_steps": self.max_steps,
        }


@dataclass
class PropertyVerdict:
    property: str  # P1_TpmWritePresent .. P4_Completeness
    status: str  # pass | fail | inconclusive
    evidence: list[dict] = field(default_factory=list)
    message: str = ""

    @property
    def short_id(self) -> str:
        return self.property.split("_")[0]

    def to_json(self) -> dict:
        return {
            "id": self.short_id,
            "status": self.status,
            "evidence": self.evidence,
            "message": self.message,
        }


@dataclass
class CoverageReport:
    measured: list[AddressRange] = field(default_factory=list)
    reachable: list[AddressRange] = field(default_factory=list)
    unmeasured_reachable: list[AddressRange] = field(default_factory=list)
    conditionally_reachable: list[AddressRange] = field(default_factory=list)

    def to_json(self) -> dict:
        def dump(ranges):
            return [{"start": f"0x{r.start:08x}", "length": r.length} for r in ranges]

        return {
            "measured": dump(self.measured),
            "reachable": dump(self.reachable),
            "unmeasured_reachable": dump(self.unmeasured_reachable),
            "conditionally_reachable": dump(self.conditionally_reachable),
        }


@dataclass
class Report:
    image_sha1: str
    verdicts: list[PropertyVerdict]
    overall: str
    timings_ms: dict[str, float]
    config: dict
    coverage: CoverageReport | None = None

    def to_json(self) -> dict:
        payload = {
            "image_sha1": self.image_sha1,
            "overall": self.overall,
            "properties": [v.to_json() for v in self.verdicts],
            "timings_ms": self.timings_ms,
            "config": self.config,
        }
        if self.coverage is not None:
            payload["coverage"] = self.coverage.to_json()
        return payload


@dataclass
class MatchedHash:
    root: int
    blocks: set[int]
    instr_addrs: set[int]
    result: cryptoid.MatchResult
    call_sites: list[tuple[int, int]]
    digest_ranges: list[AddressRange] = field(default_factory=list)


def _instr_ev(addr: int) -> dict:
    return {"kind": "instr", "addr": f"0x{addr:08x}"}


def _range_ev(r: AddressRange) -> dict:
    return {"kind": "range", "start": f"0x{r.start:08x}", "length": r.length}


def _path_ev(blocks) -> dict:
    return {"kind": "path", "blocks": [f"0x{b:08x}" for b in blocks]}


_SIGNATURE_DB = None


def _signature_db() -> cryptoid.SignatureDb:
    global _SIGNATURE_DB
    if _SIGNATURE_DB is None:
        _SIGNATURE_DB = cryptoid.make_reference_signatures()
    return _SIGNATURE_DB


def check_p1(image: FirmwareImage, cfg: Cfg, config: AnalysisConfig,
             remaining: float, facts: ProgramFacts | None = None
             ) -> tuple[PropertyVerdict, list[TpmWriteEvent]]:
    """TPM write present: at least one must-write, or a may-write whose
    backward slice is non-empty."""
    name = "P1_TpmWritePresent"
    try:
        events = symex.find_tpm_writes(image, config.explore_config(remaining))
    except AnalysisTimeout:
        return PropertyVerdict(name, "inconclusive", [_range_ev(image.code_range)],
                               "TPM write search truncated before any write was found"), []
    if not events:
        return PropertyVerdict(name, "fail", [_range_ev(image.code_range)],
                               "no instruction writes the TPM DATA_FIFO"), []
    must = [e for e in events if e.must]
    if must:
        return PropertyVerdict(name, "pass", [_instr_ev(e.instr_addr) for e in must],
                               f"{len(must)} TPM write instruction(s) found"), events
    corroborated = []
    for event in events:
        try:
            sl = backward_slice(image, cfg, SliceCriterion(event.instr_addr), facts)
        except IncompleteCfg:
            continue
        if len(sl.instructions) > 1:
            corroborated.append(event)
    if corroborated:
        return PropertyVerdict(name, "pass",
                               [_instr_ev(e.instr_addr) for e in corroborated],
                               "may-writes corroborated by non-empty backward slices"), events
    return PropertyVerdict(name, "inconclusive",
                           [_instr_ev(e.instr_addr) for e in events],
                           "only unconfirmed may-writes found"), events


def _closure_instrs(cfg: Cfg, root: int) -> tuple[set[int], list]:
    blocks = cfg.closure_blocks(root)
    instrs = []
    for b in sorted(blocks):
        instrs.extend(cfg.nodes[b].instructions)
    return blocks, instrs


def check_p2(image: FirmwareImage, cfg: Cfg, events: list[TpmWriteEvent],
             facts: ProgramFacts | None = None
             ) -> tuple[PropertyVerdict, MatchedHash | None]:
    """Authentic hash: every TPM write's slice leads to a function whose
    normalized data-flow graph embeds the full reference compression."""
    name = "P2_AuthenticHash"
    db = _signature_db()
    facts = facts or ProgramFacts(cfg)
    matched: MatchedHash | None = None
    for event in events:
        try:
            sl = backward_slice(image, cfg, SliceCriterion(event.instr_addr), facts)
        except IncompleteCfg:
            return PropertyVerdict(
                name, "fail", [_instr_ev(event.instr_addr)],
                "control flow to this TPM write is not fully recovered (IncompleteCfg)",
            ), None
        candidates = sorted(sl.entry_functions,
                            key=lambda f: (len(cfg.closure_blocks(f)), f))
        event_match = None
        for root in candidates:
            blocks, instrs = _closure_instrs(cfg, root)
            graph = cryptoid.normalize(cryptoid.build_dfg(instrs, set(blocks)))
            result = cryptoid.match_signature(graph, db)
            if result.matched_signature == AUTHENTIC_SIGNATURE:
                event_match = MatchedHash(
                    root=root,
                    blocks=blocks,
                    instr_addrs={i.addr for i in instrs},
                    result=result,
                    call_sites=list(cfg.call_sites.get(root, [])),
                )
                break
        if event_match is None:
            return PropertyVerdict(
                name, "fail", [_instr_ev(event.instr_addr)],
                "no authentic hash implementation feeds this TPM write",
            ), None
        matched = event_match
    evidence = [_range_ev(AddressRange(b, cfg.nodes[b].length))
                for b in sorted(matched.blocks)]
    return PropertyVerdict(
        name, "pass", evidence,
        f"matched {matched.result.matched_signature} rooted at 0x{matched.root:08x}",
    ), matched


def _collect_call_args(image: FirmwareImage, matched: MatchedHash,
                       config: AnalysisConfig, remaining: float) -> dict[int, list[tuple]]:
    """Per call site: list of (r0, r1, r2) solution tuples observed at the call."""
    call_addrs = {addr for addr, _ in matched.call_sites}
    if not call_addrs:
        raise UnresolvedArguments("the matched hash has no call sites")
    explorer = symex.Explorer(image, config.explore_config(remaining))
    outcome = explorer.explore(
        image.entry, collect_at=call_addrs, stop_on_collect=False,
        collect_cap=config.loop_bound + 1, collect_window=8192,
    )
    if not outcome.collected:
        raise UnresolvedArguments("no path reaches the hash call sites in budget")
    if outcome.truncations - {"collect_cap", "collect_window"}:
        raise UnresolvedArguments(
            f"argument exploration truncated: {sorted(outcome.truncations)}")
    args: dict[int, list[tuple]] = {}
    for pc, regs, constraints, _ in outcome.collected:
        sols = []
        for reg in (0, 1, 2):
            value = regs[reg]
            if isinstance(value, int):
                sols.append((value,))
                continue
            res = solve(constraints, value, limit=config.solution_cap)
            if not (res.sat and res.complete):
                raise UnresolvedArguments(f"argument r{reg} at 0x{pc:08x} is unresolved")
            sols.append(tuple(res.values))
        args.setdefault(pc, []).append(tuple(sols))
    return args


def extract_measured_regions(image: FirmwareImage, cfg: Cfg, matched: MatchedHash,
                             config: AnalysisConfig, remaining: float
                             ) -> tuple[list[AddressRange], list[AddressRange], list[dict]]:
    """Concrete (buffer, length) regions hashed at each call site of the
    matched function; ABI: r0 = address, r1 = length, r2 = digest out.

    Returns (guaranteed regions, all alternatives, warnings).  When a call
    site admits several argument solutions, only the intersection of its
    alternatives counts as guaranteed-measured.
    """
    args = _collect_call_args(image, matched, config, remaining)
    guaranteed: list[AddressRange] = []
    alternatives: list[AddressRange] = []
    warnings: list[dict] = []
    digest_ranges: list[AddressRange] = []
    for pc in sorted(args):
        site_alternatives: list[AddressRange] = []
        for r0_sols, r1_sols, r2_sols in args[pc]:
            for a in r0_sols:
                for ln in r1_sols:
                    if ln == 0:
                        warnings.append({"kind": "instr", "addr": f"0x{pc:08x}",
                                         "note": "zero-length measurement"})
                        continue
                    site_alternatives.append(AddressRange(a, ln))
            for out in r2_sols:
                digest_ranges.append(AddressRange(out, 20))
        if not site_alternatives:
            continue
        alternatives.extend(site_alternatives)
        common = site_alternatives[0]
        for alt in site_alternatives[1:]:
            lo = max(common.start, alt.start)
            hi = min(common.end, alt.end)
            if lo >= hi:
                common = None
                break
            common = AddressRange(lo, hi - lo)
        if common is not None:
            guaranteed.append(common)
    matched.digest_ranges = normalize_ranges(digest_ranges)
    return normalize_ranges(guaranteed), sorted(set(alternatives)), warnings


def _enumerate_paths(cfg: Cfg, start: int, goal: int, loop_bound: int,
                     path_cap: int) -> list[list[int]]:
    """Bounded stack-aware DFS over cfg edges from start block to goal block."""
    paths: list[list[int]] = []
    ret_edges: dict[int, list[int]] = {}
    plain: dict[int, list[tuple[int, str]]] = {}
    for src, dst, kind in sorted(cfg.edges):
        if kind == "ret":
            ret_edges.setdefault(src, []).append(dst)
        else:
            plain.setdefault(src, []).append((dst, kind))

    budget_hit = []

    def dfs(block, path, visits, stack):
        if len(paths) >= path_cap:
            budget_hit.append(True)
            return
        if block == goal:
            paths.append(list(path))
            return
        node = cfg.nodes.get(block)
        if node is None:
            return
        is_call = node.terminator in ("call",) or (
            node.terminator == "indirect" and node.last.opcode == "CALLR")
        for dst, kind in plain.get(block, ()):
            if kind == "fallthrough" and is_call:
                continue  # control reaches the return site via the callee
            if visits.get(dst, 0) > loop_bound:
                continue
            next_stack = stack
            if kind == "call":
                site = block + cfg.nodes[block].length  # return site
                next_stack = stack + (site,)
            visits[dst] = visits.get(dst, 0) + 1
            path.append(dst)
            dfs(dst, path, visits, next_stack)
            path.pop()
            visits[dst] -= 1
        if node.terminator == "ret":
            if stack:
                targets = [stack[-1]]
                next_stack = stack[:-1]
            else:
                targets = ret_edges.get(block, [])
                next_stack = stack
            for dst in targets:
                if visits.get(dst, 0) > loop_bound:
                    continue
                visits[dst] = visits.get(dst, 0) + 1
                path.append(dst)
                dfs(dst, path, visits, next_stack)
                path.pop()
                visits[dst] -= 1

    dfs(start, [start], {start: 1}, ())
    if budget_hit:
        raise PathBudgetExceeded(f"more than {path_cap} paths")
    return paths


def check_p3(image: FirmwareImage, cfg: Cfg, events: list[TpmWriteEvent],
             matched: MatchedHash, config: AnalysisConfig,
             deadline: float | None = None) -> PropertyVerdict:
    """Atomicity: along every path from the hash's return to each TPM write,
    the written bytes derive only from the hash's output (move chains
    allowed), never from definitions outside the matched implementation."""
    name = "P3_Atomicity"
    if not matched.digest_ranges:
        return PropertyVerdict(name, "inconclusive", [_instr_ev(matched.root)],
                               "digest output location unresolved")
    return_sites = sorted({site for _, site in matched.call_sites})
    machine = Machine(image, record=False)
    try:
        machine.run(config.max_steps, stop_at=set(return_sites), deadline=deadline)
    except Exception:
        pass  # seed registers stay partial; replay falls back to None
    seed_regs = list(machine.state.regs)

    for event in events:
        home = cfg.block_at(event.instr_addr)
        if home is None:
            return PropertyVerdict(name, "fail", [_instr_ev(event.instr_addr)],
                                   "TPM write outside the recovered cfg")
        checked_any = False
        for site in return_sites:
            try:
                paths = _enumerate_paths(cfg, site, home.start,
                                         config.loop_bound, config.path_cap)
            except PathBudgetExceeded as exc:
                return PropertyVerdict(name, "inconclusive",
                                       [_instr_ev(event.instr_addr)], str(exc))
            for path in paths:
                checked_any = True
                verdict = _check_path_atomicity(cfg, path, event, matched,
                                                seed_regs)
                if verdict is not None:
                    return verdict
        if not checked_any:
            return PropertyVerdict(
                name, "fail", [_instr_ev(event.instr_addr)],
                "no path connects the hash's return to this TPM write")
    return PropertyVerdict(name, "pass",
                           [_instr_ev(e.instr_addr) for e in events],
                           "all written bytes originate from the matched hash output")


def _check_path_atomicity(cfg: Cfg, path: list[int], event: TpmWriteEvent,
                          matched: MatchedHash, seed_regs) -> PropertyVerdict | None:
    """None when the path is clean; a fail verdict naming the faulty
    instruction otherwise."""
    name = "P3_Atomicity"
    dum = reaching_defs(cfg, path, init_regs=seed_regs)
    trusted = matched.digest_ranges

    def trusted_init(addr: int | None) -> bool:
        return addr is not None and any(r.contains(addr) for r in trusted)

    offending: list[int] = []
    seen: set = set()

    def walk_value(defs, context_store: int | None) -> None:
        for d in defs:
            if (d, context_store) in seen:
                continue
            seen.add((d, context_store))
            if d == "init":
                # a register value predating the path cannot be attributed
                offending.append(context_store if context_store is not None
                                 else dum.steps[0].instr.addr)
                continue
            step = dum.steps[d]
            inst = step.instr
            if inst.addr in matched.instr_addrs:
                continue  # produced inside the matched hash
            op = inst.opcode
            if op == "MOV":
                walk_value(step.use_defs.get(("reg", inst.rs1), frozenset(("init",))),
                           context_store)
            elif op in ("LOAD", "LOADB"):
                for loc, defs2 in step.use_defs.items():
                    if loc[0] != "mem":
                        continue
                    byte_addr = loc[1]
                    clean = set()
                    for d2 in defs2:
                        if d2 == "init":
                            if not trusted_init(byte_addr):
                                offending.append(inst.addr)
                        else:
                            clean.add(d2)
                    for d2 in clean:
                        store_step = dum.steps[d2]
                        if store_step.instr.addr in matched.instr_addrs:
                            continue
                        walk_value(store_step.use_defs.get(
                            ("reg", store_step.instr.rs2), frozenset(("init",))),
                            store_step.instr.addr)
            else:
                # MOVI or arithmetic outside the hash modified the value
                offending.append(context_store if context_store is not None else inst.addr)

    for step in dum.steps:
        if step.instr.addr != event.instr_addr:
            continue
        walk_value(step.use_defs.get(("reg", step.instr.rs2), frozenset(("init",))),
                   None)
    if not offending:
        return None
    evidence = [_instr_ev(a) for a in sorted(set(offending))]
    evidence.append(_path_ev(path))
    return PropertyVerdict(name, "fail", evidence,
                           "the measurement is modified between the hash and the TPM write")


def check_p4(cfg: Cfg, measured: list[AddressRange], image: FirmwareImage,
             warnings: list[dict] | None = None
             ) -> tuple[PropertyVerdict, CoverageReport]:
    """Completeness: every reachable block lies inside the measured regions
    and the control-flow graph has no unresolved exits."""
    name = "P4_Completeness"
    reachable = reachable_blocks(cfg)
    coverage = CoverageReport(
        measured=normalize_ranges(measured),
        reachable=normalize_ranges(reachable),
        unmeasured_reachable=subtract_ranges(reachable, measured),
    )
    if cfg.unresolved or cfg.decode_errors:
        block_ranges = [AddressRange(b.start, b.length) for b in cfg.nodes.values()]
        coverage.conditionally_reachable = subtract_ranges([image.code_range], block_ranges)
    evidence: list[dict] = [_range_ev(r) for r in coverage.unmeasured_reachable]
    message = ""
    status = "pass"
    if coverage.unmeasured_reachable:
        status = "fail"
        message = "reachable code outside the measured regions"
    if cfg.unresolved:
        status = "fail"
        evidence += [_range_ev(AddressRange(b, cfg.nodes[b].length))
                     for b in sorted(cfg.unresolved)]
        message = (message + "; " if message else "") + \
            "IncompleteCfg: unresolved indirect control flow"
        evidence += [_range_ev(r) for r in coverage.conditionally_reachable]
    if cfg.decode_errors:
        status = "fail"
        evidence += [_instr_ev(a) for a, _ in cfg.decode_errors]
        message = (message + "; " if message else "") + "undecodable reachable code"
    if warnings:
        evidence += warnings
    if status == "pass":
        evidence = [_range_ev(r) for r in coverage.measured]
        message = "all reachable blocks fall within the measured regions"
    return PropertyVerdict(name, status, evidence, message), coverage


def _skipped(name: str, blocker: str, image: FirmwareImage) -> PropertyVerdict:
    return PropertyVerdict(name, "inconclusive", [_range_ev(image.code_range)],
                           f"not evaluated: requires {blocker}")


def validate(image_bytes: bytes, config: AnalysisConfig | None = None) -> Report:
    """Run the full pipeline over a serialized firmware image."""
    config = config or AnalysisConfig()
    started = time.perf_counter()
    deadline = started + config.timeout_seconds
    timings: dict[str, float] = {}
    digest = hashlib.sha1(image_bytes).hexdigest()

    def remaining() -> float:
        return deadline - time.perf_counter()

    def clock(stage: str, t0: float) -> None:
        timings[stage] = round((time.perf_counter() - t0) * 1000.0, 3)

    t0 = time.perf_counter()
    try:
        image = load_image(image_bytes)
    except IsaError as exc:
        clock("load", t0)
        verdicts = [
            PropertyVerdict("P1_TpmWritePresent", "inconclusive", [{"kind": "range", "start": "0x0", "length": len(image_bytes)}], f"image rejected: {exc}"),
            PropertyVerdict("P2_AuthenticHash", "inconclusive", [{"kind": "range", "start": "0x0", "length": len(image_bytes)}], "image rejected"),
            PropertyVerdict("P3_Atomicity", "inconclusive", [{"kind": "range", "start": "0x0", "length": len(image_bytes)}], "image rejected"),
            PropertyVerdict("P4_Completeness", "inconclusive", [{"kind": "range", "start": "0x0", "length": len(image_bytes)}], "image rejected"),
        ]
        return Report(digest, verdicts, "inconclusive", timings, config.echo())
    clock("load", t0)

    def out_of_budget(name: str) -> PropertyVerdict:
        return PropertyVerdict(name, "inconclusive", [_range_ev(image.code_range)],
                               "analysis budget exhausted")

    t0 = time.perf_counter()
    cfg = recover_cfg(image, config.explore_config(remaining()))
    facts = ProgramFacts(cfg)
    clock("cfg", t0)

    t0 = time.perf_counter()
    if remaining() > 0:
        p1, events = check_p1(image, cfg, config, remaining(), facts)
    else:
        p1, events = out_of_budget("P1_TpmWritePresent"), []
    clock("p1", t0)

    matched = None
    coverage = None
    t0 = time.perf_counter()
    if p1.status != "pass":
        p2 = _skipped("P2_AuthenticHash", "a confirmed TPM write (P1)", image)
    elif remaining() <= 0:
        p2 = out_of_budget("P2_AuthenticHash")
    else:
        p2, matched = check_p2(image, cfg, events, facts)
    clock("p2", t0)

    t0 = time.perf_counter()
    warnings: list[dict] = []
    measured: list[AddressRange] = []
    extraction_failure = None
    if matched is not None and remaining() > 0:
        try:
            measured, _alternatives, warnings = extract_measured_regions(
                image, cfg, matched, config, remaining())
        except UnresolvedArguments as exc:
            extraction_failure = str(exc)
    clock("args", t0)

    t0 = time.perf_counter()
    if matched is None:
        p3 = _skipped("P3_Atomicity", "an identified hash function (P2)", image)
    elif remaining() <= 0:
        p3 = out_of_budget("P3_Atomicity")
    else:
        p3 = check_p3(image, cfg, events, matched, config, deadline)
    clock("p3", t0)

    t0 = time.perf_counter()
    if matched is None:
        p4 = _skipped("P4_Completeness", "an identified hash function (P2)", image)
    elif remaining() <= 0 and extraction_failure is None and not measured:
        p4 = out_of_budget("P4_Completeness")
    elif extraction_failure is not None:
        p4, coverage = check_p4(cfg, [], image, warnings)
        p4.status = "fail"
        p4.message = f"measurement arguments unresolved: {extraction_failure}"
        p4.evidence.insert(0, _instr_ev(matched.root))
    else:
        p4, coverage = check_p4(cfg, measured, image, warnings)
    clock("p4", t0)

    verdicts = [p1, p2, p3, p4]
    if all(v.status == "pass" for v in verdicts):
        overall = "valid"
    elif any(v.status == "fail" for v in verdicts):
        overall = "invalid"
    else:
        overall = "inconclusive"
    timings["total"] = round((time.perf_counter() - started) * 1000.0, 3)
    return Report(digest, verdicts, overall, timings, config.echo(), coverage)
