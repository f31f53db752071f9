from bootkeeper.cfg import reachable_blocks, recover_cfg, resolve_indirect, to_dot
from bootkeeper.isa import AddressRange, assemble
from bootkeeper.machine import run


def test_straight_line_single_block():
    img = assemble(".entry start\nstart: MOVI r1, 1\nHALT\n")
    cfg = recover_cfg(img)
    assert len(cfg.nodes) == 1
    assert not cfg.edges
    assert cfg.nodes[img.entry].terminator == "halt"


DIAMOND = """
.entry b1
b1: BEQ r0, r0, b3
b2: MOVI r1, 1
    JMP b4
b3: MOVI r2, 2
b4: HALT
"""


def test_diamond_shape():
    img = assemble(DIAMOND)
    cfg = recover_cfg(img)
    assert len(cfg.nodes) == 4
    assert len(cfg.edges) == 4
    kinds = sorted(kind for _, _, kind in cfg.edges)
    assert kinds == ["branch", "fallthrough", "fallthrough", "jump"]


JUMP_TABLE = """
.entry start
start:
    MOVI r3, 3
    BGEU r1, r3, default
    MOVI r2, table
    SHLI r4, r1, 3
    ADD r2, r2, r4
    JMPR r2
table:
    JMP case0
    JMP case1
    JMP case2
default:
    HALT
case0: HALT
case1: HALT
case2: HALT
"""


def test_jump_table_resolved():
    img = assemble(JUMP_TABLE)
    cfg = recover_cfg(img)
    assert not cfg.unresolved
    table = 0x100030
    indirect_edges = {(s, d) for s, d, k in cfg.edges if k == "indirect"}
    assert {d for _, d in indirect_edges} == {table, table + 8, table + 16}

    # oracle: concrete execution with each index patched in reaches exactly
    # the statically resolved targets
    concrete_targets = set()
    for idx in range(3):
        src = JUMP_TABLE.replace("start:", f"start:\n    MOVI r1, {idx}")
        state, _, trace = run(assemble(src), 100)
        pcs = [e.pc for e in trace.entries]
        jmpr_positions = [i for i, e in enumerate(trace.entries) if e.instr.opcode == "JMPR"]
        concrete_targets.update(pcs[i + 1] for i in jmpr_positions)
    # the patched variant shifts every address by 8
    assert concrete_targets == {t + 8 for t, _ in [(table, 0), (table + 8, 0), (table + 16, 0)]}


def test_constant_indirect_target():
    img = assemble(
        """
        .entry start
        start:
            MOVI r1, dest
            JMPR r1
        dest:
            HALT
        """
    )
    cfg = recover_cfg(img)
    assert not cfg.unresolved
    assert (img.entry, 0x100010, "indirect") in cfg.edges


def test_data_driven_dispatch_resolves_to_single_target():
    img = assemble(
        """
        .entry start
        start:
            MOVI r1, selector
            LOAD r2, [r1]
            JMPR r2
        a:  HALT
        b:  HALT
        .data
        selector: .word b
        """
    )
    cfg = recover_cfg(img)
    assert not cfg.unresolved
    b_addr = 0x100020
    assert (img.entry, b_addr, "indirect") in cfg.edges
    # the never-selected sibling is not reachable and therefore not a node
    assert 0x100018 not in cfg.nodes


def test_runtime_written_target_is_unresolved():
    img = assemble(
        """
        .entry start
        start:
            MOVI r2, slot
            STORE [r2], r5
            LOAD r1, [r2]
            JMPR r1
        .data
        slot: .word 0
        """
    )
    cfg = recover_cfg(img)
    assert len(cfg.unresolved) == 1
    block_start = next(iter(cfg.unresolved))
    assert cfg.nodes[block_start].terminator == "indirect"
    # the public resolver agrees and keeps the block flagged
    assert resolve_indirect(img, cfg, cfg.nodes[block_start]) == set()
    assert block_start in cfg.unresolved


def test_block_splitting_on_back_edge():
    img = assemble(
        """
        .entry start
        start:
            MOVI r1, 1
        mid:
            MOVI r2, 2
            BEQ r0, r0, end
            MOVI r3, 3
        end:
            JMP mid
        """
    )
    cfg = recover_cfg(img)
    assert sorted(cfg.nodes) == [0x100000, 0x100008, 0x100018, 0x100020]
    assert cfg.nodes[0x100000].terminator == "fallthrough"
    assert (0x100000, 0x100008, "fallthrough") in cfg.edges
    assert (0x100020, 0x100008, "jump") in cfg.edges


CALL_FIXTURE = """
.entry start
start:
    MOVI r7, stack_top
    CALL fn
    MOVI r3, 3
    HALT
fn:
    MOVI r2, 2
    RET
.data
stack: .word 0 0 0 0
stack_top:
"""


def test_call_and_ret_edges():
    img = assemble(CALL_FIXTURE)
    cfg = recover_cfg(img)
    start, retsite, fn = 0x100000, 0x100010, 0x100020
    assert (start, fn, "call") in cfg.edges
    assert (start, retsite, "fallthrough") in cfg.edges
    assert (fn, retsite, "ret") in cfg.edges
    assert cfg.block_function[fn] == fn
    assert cfg.block_function[retsite] == start
    assert cfg.call_sites[fn] == [(0x100008, retsite)]


def test_dynamic_subsumption():
    img = assemble(CALL_FIXTURE)
    cfg = recover_cfg(img)
    _, _, trace = run(img, 100)
    spans = [(b.start, b.end) for b in cfg.nodes.values()]
    for entry in trace.entries:
        assert any(lo <= entry.pc < hi for lo, hi in spans), hex(entry.pc)


def test_blocks_do_not_overlap():
    img = assemble(DIAMOND)
    cfg = recover_cfg(img)
    blocks = sorted(cfg.nodes.values(), key=lambda b: b.start)
    for a, b in zip(blocks, blocks[1:]):
        assert a.end <= b.start


def test_recovery_deterministic():
    img = assemble(JUMP_TABLE)
    c1, c2 = recover_cfg(img), recover_cfg(img)
    assert sorted(c1.nodes) == sorted(c2.nodes)
    assert c1.edges == c2.edges


def test_reachable_blocks_projection():
    img = assemble(DIAMOND)
    cfg = recover_cfg(img)
    ranges = reachable_blocks(cfg)
    assert ranges == sorted(ranges)
    assert all(isinstance(r, AddressRange) for r in ranges)
    assert sum(r.length for r in ranges) == len(img.code)


def test_dot_export():
    img = assemble(DIAMOND)
    dot = to_dot(recover_cfg(img))
    assert dot.startswith("digraph")
    assert '"0x00100000"' in dot
    assert "branch" in dot
