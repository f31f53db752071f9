import random

from bootkeeper import corpus, cryptoid
from bootkeeper.corpus import SHA1_K
from bootkeeper.cryptoid import (
    build_dfg,
    evaluate,
    export_db,
    make_reference_signatures,
    match_signature,
    normalize,
)
from bootkeeper.isa import assemble

from dfg_gen import random_dfg


def _instrs(src: str):
    img = assemble(".entry start\nstart:\n" + src + "\nHALT\n")
    return img.instructions()


def test_build_dfg_single_add():
    g = build_dfg(_instrs("ADD r0, r1, r2"))
    kinds = sorted(n.kind for n in g.nodes.values())
    assert kinds == ["ADD", "input", "input"]


def test_move_elimination():
    direct = normalize(build_dfg(_instrs("ADD r0, r1, r2")))
    moved = normalize(build_dfg(_instrs("MOV r3, r1\nADD r0, r3, r2")))
    assert direct.canonical_dump() == moved.canonical_dump()


def test_commuted_operands_identical():
    a = normalize(build_dfg(_instrs("XOR r0, r1, r2")))
    b = normalize(build_dfg(_instrs("XOR r0, r2, r1")))
    assert a.canonical_dump() == b.canonical_dump()


def test_association_flattening():
    # (x + y) + z and x + (y + z) normalize to one n-ary sum
    a = normalize(build_dfg(_instrs("ADD r4, r1, r2\nADD r0, r4, r3")))
    b = normalize(build_dfg(_instrs("ADD r4, r2, r3\nADD r0, r1, r4")))
    assert a.canonical_dump() == b.canonical_dump()


def test_shiftor_becomes_rotation():
    block = 0x100000
    shiftor = normalize(build_dfg(_instrs("SHLI r2, r1, 5\nSHRI r3, r1, 27\nOR r0, r2, r3")))
    # the value that lands in r0 is a rotation node after rewriting
    result = shiftor.nodes[shiftor.final_regs[(block, 0)]]
    assert result.kind == "ROL"
    assert shiftor.nodes[result.operands[1]].value == 5
    # and it evaluates exactly like the rotation
    rol = normalize(build_dfg(_instrs("ROLI r0, r1, 5")))
    for x in (0, 1, 0x80000001, 0xDEADBEEF):
        va = evaluate(rol, {0: x})[rol.roots.index(rol.final_regs[(block, 0)])]
        vb = evaluate(shiftor, {0: x})[shiftor.roots.index(shiftor.final_regs[(block, 0)])]
        assert va == vb


def test_double_rotation_composes():
    block = 0x100000
    g = normalize(build_dfg(_instrs("ROLI r2, r1, 7\nROLI r0, r2, 9")))
    result = g.nodes[g.final_regs[(block, 0)]]
    assert result.kind == "ROL"
    assert g.nodes[result.operands[1]].value == 16


def test_constant_folding():
    g = normalize(build_dfg(_instrs("MOVI r1, 6\nMOVI r2, 7\nADD r0, r1, r2")))
    assert 13 in g.const_values()
    assert not any(n.kind == "ADD" for n in g.nodes.values())


def test_normalize_idempotent_on_random_graphs():
    rng = random.Random(0xD0F6)
    for _ in range(200):
        g = random_dfg(rng)
        once = normalize(g)
        twice = normalize(once)
        assert once.canonical_dump() == twice.canonical_dump()


def test_normalize_preserves_semantics():
    rng = random.Random(0x5EED)
    for _ in range(100):
        g = random_dfg(rng)
        n = normalize(g)
        for trial in range(5):
            env = {t: rng.randrange(1 << 32) for t in range(8)}
            assert evaluate(g, env) == evaluate(n, env)


def test_reference_db_contents():
    db = make_reference_signatures()
    assert len(db.signatures) >= 2
    assert "sha1-compression" in db.composite
    for sig in db.signatures.values():
        # signatures are normalized: normalizing again changes nothing
        again = normalize(sig.graph)
        assert again.canonical_dump() == sig.graph.canonical_dump()
        # acyclic by construction: topological dump covers all nodes
        assert len(sig.graph.canonical_dump()) == len(sig.graph.nodes) + 1


def _closure_graph(images, cfg_of, fid, root_label):
    img = images[fid]
    cfg = cfg_of(fid)
    blocks = cfg.closure_blocks(img.symbols[root_label])
    insts = []
    for b in sorted(blocks):
        insts.extend(cfg.nodes[b].instructions)
    return normalize(build_dfg(insts, set(blocks)))


def test_self_match_score_one(corpus_build, cfg_of):
    _, images = corpus_build
    db = make_reference_signatures()
    g = _closure_graph(images, cfg_of, "B-Os", "sha1_core")
    res = match_signature(g, db)
    assert res.matched_signature == "sha1-compression"
    assert res.score == 1.0
    assert res.matched_blocks
    # each component embedding is injective (components may share candidate
    # constants with each other)
    per_component: dict[str, set[int]] = {}
    for key, cand in res.mapping.items():
        per_component.setdefault(key.split(":")[0], set()).add(cand)
    for comp, cands in per_component.items():
        sig_nodes = sum(1 for k in res.mapping if k.startswith(comp + ":"))
        assert len(cands) == sig_nodes, comp


def test_all_benign_variants_match(corpus_build, cfg_of):
    _, images = corpus_build
    db = make_reference_signatures()
    for v in corpus.BENIGN_VARIANTS:
        g = _closure_graph(images, cfg_of, f"B-{v}", "sha1_core")
        res = match_signature(g, db)
        assert res.matched_signature == "sha1-compression", v


def test_tampered_constant_breaks_compression(corpus_build, cfg_of):
    _, images = corpus_build
    db = make_reference_signatures()
    g = _closure_graph(images, cfg_of, "A2", "a2_sha1")
    res = match_signature(g, db)
    assert res.matched_signature != "sha1-compression"


def test_removed_round_subtree_breaks_compression(corpus_build, cfg_of):
    """Dropping any of the four round-type bodies defeats the full match."""
    _, images = corpus_build
    img = images["B-Os"]
    cfg = cfg_of("B-Os")
    blocks = cfg.closure_blocks(img.symbols["sha1_core"])
    db = make_reference_signatures()
    for i in range(4):
        body = img.symbols[f"rounds_canon_l{i}"]
        body_end = body + cfg.nodes[body].length
        insts = []
        for b in sorted(blocks):
            insts.extend(inst for inst in cfg.nodes[b].instructions
                         if not body <= inst.addr < body_end)
        g = normalize(build_dfg(insts, set(blocks)))
        res = match_signature(g, db)
        assert res.matched_signature != "sha1-compression", f"round {i}"


def _flipped_candidate(k_index: int):
    ks = tuple(k ^ 1 if i == k_index else k for i, k in enumerate(SHA1_K))
    lines = [
        ".entry e",
        "e:",
        "MOVI r7, stack_top",
        "MOVI r0, 0x00100000",
        "MOVI r1, 64",
        "MOVI r2, digest",
        "CALL t_sha1",
        "HALT",
        *corpus._standalone_hash("t", ks=ks),
        *corpus._emit_data("e"),
    ]
    img = assemble("\n".join(lines))
    from bootkeeper.cfg import recover_cfg

    cfg = recover_cfg(img)
    blocks = cfg.closure_blocks(img.symbols["t_sha1"])
    insts = []
    for b in sorted(blocks):
        insts.extend(cfg.nodes[b].instructions)
    return normalize(build_dfg(insts, set(blocks)))


def test_any_single_flipped_round_constant_breaks_match():
    db = make_reference_signatures()
    for i in range(4):
        res = match_signature(_flipped_candidate(i), db)
        assert res.matched_signature != "sha1-compression", f"K{i}"


CRC32 = """
.entry e
e:
    MOVI r0, data_buf
    MOVI r1, 16
    MOVI r2, 0xFFFFFFFF
    MOVI r3, 0
crc_outer:
    BGEU r3, r1, crc_done
    ADD r4, r0, r3
    LOADB r5, [r4]
    XOR r2, r2, r5
    MOVI r6, 8
crc_bits:
    ANDI r4, r2, 1
    SHRI r2, r2, 1
    MOVI r5, 0
    BEQ r4, r5, crc_noxor
    XORI r2, r2, 0xEDB88320
crc_noxor:
    SUBI r6, r6, 1
    MOVI r5, 0
    BNE r6, r5, crc_bits
    ADDI r3, r3, 1
    JMP crc_outer
crc_done:
    XORI r2, r2, 0xFFFFFFFF
    HALT
.data
data_buf: .word 1 2 3 4
"""


def test_crc32_negative_control():
    from bootkeeper.cfg import recover_cfg

    img = assemble(CRC32)
    cfg = recover_cfg(img)
    insts = []
    for b in sorted(cfg.nodes):
        insts.extend(cfg.nodes[b].instructions)
    g = normalize(build_dfg(insts, set(cfg.nodes)))
    db = make_reference_signatures()
    res = match_signature(g, db)
    assert res.matched_signature is None
    # the SHA-1 fingerprint constants are nowhere in the graph
    assert not (set(SHA1_K) & g.const_values())


def test_export_db(tmp_path):
    db = make_reference_signatures()
    out = tmp_path / "sigs.json"
    export_db(db, out)
    import json

    payload = json.loads(out.read_text())
    assert set(payload["signatures"]) == set(db.signatures)
    assert payload["composite"]["sha1-compression"]
