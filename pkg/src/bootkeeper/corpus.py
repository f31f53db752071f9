"""Fixture firmware generator: benign optimization variants and attack images.

All benign images share one byte-identical code section holding every
variant implementation behind a tiny data-driven dispatcher (the selector
word lives in the unmeasured data section), so every benign run extends
PCR0 to the same golden value while each image still measures all of its
reachable code.  Attack images either tamper with the hash, hide code
beyond the hardcoded measured range, measure the dormant section while
running an unmeasured driver, or replay the golden digest over a real
measurement.

Hash routine ABI: r0 = buffer address, r1 = byte length, r2 = digest output
pointer; r7 is the stack pointer.  Measurements are streamed to the TPM
DATA_FIFO as five word stores per digest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .isa import INSTR_SIZE, LOAD_BASE, FirmwareImage, assemble, serialize
from .machine import ZERO_DIGEST, sha1, tpm_extend

SECTION_SIZE = 0x2000  # all corpus code sections are padded to this size

SHA1_K = (0x5A827999, 0x6ED9EBA1, 0x8F1BBCDC, 0xCA62C1D6)
SHA1_IV = (0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476, 0xC3D2E1F0)

BENIGN_VARIANTS = ("O0", "O1", "O2", "O3", "Os")
ATTACK_VARIANTS = ("A1_NoHash", "A2_TamperedSha1", "A3_HiddenCode",
                   "A4_ForgedParams", "A5_Overwrite", "A6_Decoy")

CANON_REGS = {"a": "r0", "b": "r1", "c": "r2", "d": "r3", "e": "r4", "s1": "r5", "s2": "r6"}
RENAMED_REGS = {"a": "r4", "b": "r3", "c": "r2", "d": "r1", "e": "r0", "s1": "r5", "s2": "r6"}

# labels of the canonical round-loop bodies and the schedule-expansion body,
# used to derive reference signatures from an assembled image
ROUND_BODY_LABELS = ("rounds_canon_l0", "rounds_canon_l1", "rounds_canon_l2", "rounds_canon_l3")
SCHED_BODY_LABEL = "sched_canon_exp"

A1_FAKE_WORDS = (0x11111111, 0x22222222, 0x33333333, 0x44444444, 0x55555555)


class UnknownFixture(Exception):
    pass


@dataclass
class FixtureSpec:
    id: str
    kind: str  # benign | attack | stress
    variant: str
    file: str
    expected: dict[str, str]
    designated: str | None
    measured_manifest: list[dict[str, int]]
    pcr_matches_manifest_chain: bool
    expected_pcr0: str | None
    notes: str = ""

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "variant": self.variant,
            "file": self.file,
            "expected": self.expected,
            "designated": self.designated,
            "measured_manifest": self.measured_manifest,
            "pcr_matches_manifest_chain": self.pcr_matches_manifest_chain,
            "expected_pcr0": self.expected_pcr0,
            "notes": self.notes,
        }


# ---------------------------------------------------------------------------
# assembly emitters


def _bswap(dst: str, src: str, tmp: str) -> list[str]:
    # tmp must differ from src and dst; dst may equal src
    return [
        f"ROLI {tmp}, {src}, 8",
        f"ANDI {tmp}, {tmp}, 0x00FF00FF",
        f"ROLI {dst}, {src}, 24",
        f"ANDI {dst}, {dst}, 0xFF00FF00",
        f"OR {dst}, {dst}, {tmp}",
    ]


def _rot(dst: str, src: str, amount: int, idiom: str, tmp: str) -> list[str]:
    if idiom == "rol":
        return [f"ROLI {dst}, {src}, {amount}"]
    # shift-or form; tmp read before dst is written so dst may equal src
    return [
        f"SHRI {tmp}, {src}, {32 - amount}",
        f"SHLI {dst}, {src}, {amount}",
        f"OR {dst}, {dst}, {tmp}",
    ]


def _emit_sched(p: str, idiom: str = "rol", unroll: int = 1) -> list[str]:
    """Message-schedule routine: r0 = chunk base; fills the schedule buffer."""
    L = [f"{p}:", "MOVI r1, g_w", "MOVI r2, 0", f"{p}_l16:"]
    L += [
        "SHLI r3, r2, 2",
        "ADD r4, r0, r3",
        "LOAD r5, [r4]",
        *_bswap("r6", "r5", "r3"),
        "SHLI r3, r2, 2",
        "ADD r4, r1, r3",
        "STORE [r4], r6",
        "ADDI r2, r2, 1",
        "MOVI r3, 16",
        f"BLTU r2, r3, {p}_l16",
    ]
    L.append(f"{p}_exp:")
    for step in range(unroll):
        base = step * 4
        dst = f"[r4+{base}]" if base else "[r4]"
        L += [
            "SHLI r3, r2, 2",
            "ADD r4, r1, r3",
            f"LOAD r5, [r4-{12 - base}]",
            f"LOAD r6, [r4-{32 - base}]",
            "XOR r5, r5, r6",
            f"LOAD r6, [r4-{56 - base}]",
            "XOR r5, r5, r6",
            f"LOAD r6, [r4-{64 - base}]",
            "XOR r5, r5, r6",
            *_rot("r5", "r5", 1, idiom, "r6"),
            f"STORE {dst}, r5",
        ]
    L += [
        f"ADDI r2, r2, {unroll}",
        "MOVI r3, 80",
        f"BLTU r2, r3, {p}_exp",
        "RET",
    ]
    return L


def _round_f(kind: str, m: dict[str, str], dst: str) -> list[str]:
    b, c, d, s2 = m["b"], m["c"], m["d"], m["s2"]
    if kind == "ch":
        return [
            f"AND {dst}, {b}, {c}",
            f"XORI {s2}, {b}, 0xFFFFFFFF",
            f"AND {s2}, {s2}, {d}",
            f"OR {dst}, {dst}, {s2}",
        ]
    if kind == "maj":
        return [
            f"AND {dst}, {b}, {c}",
            f"AND {s2}, {b}, {d}",
            f"OR {dst}, {dst}, {s2}",
            f"AND {s2}, {c}, {d}",
            f"OR {dst}, {dst}, {s2}",
        ]
    return [f"XOR {dst}, {b}, {c}", f"XOR {dst}, {dst}, {d}"]


def _emit_rounds(p: str, regs: dict[str, str] | None = None, order: str = "rol_first",
                 idiom: str = "rol", ks: tuple[int, int, int, int] = SHA1_K) -> list[str]:
    """The 80 compression rounds as four 20-iteration loops over g_h/g_w."""
    m = regs or CANON_REGS
    a, b, c, d, e, s1, s2 = (m[k] for k in ("a", "b", "c", "d", "e", "s1", "s2"))
    if order == "f_first" and idiom != "rol":
        raise ValueError("f_first ordering leaves no scratch register for shift-or")
    L = [
        f"{p}:",
        f"MOVI {s2}, g_h",
        f"LOAD {a}, [{s2}]",
        f"LOAD {b}, [{s2}+4]",
        f"LOAD {c}, [{s2}+8]",
        f"LOAD {d}, [{s2}+12]",
        f"LOAD {e}, [{s2}+16]",
        f"MOVI {s1}, g_w",
        f"MOVI {s2}, g_wptr",
        f"STORE [{s2}], {s1}",
    ]
    f_kinds = ("ch", "parity", "maj", "parity")
    for i, (k, fk) in enumerate(zip(ks, f_kinds)):
        body = f"{p}_l{i}"
        L += [
            f"MOVI {s1}, 0",
            f"MOVI {s2}, g_t",
            f"STORE [{s2}], {s1}",
            f"{body}:",
        ]
        if order == "rol_first":
            L += _rot(s1, a, 5, idiom, s2)
            L += [f"ADD {s1}, {s1}, {e}"]  # e is dead afterwards
            L += _round_f(fk, m, e)
            L += [f"ADD {s1}, {s1}, {e}"]
        else:
            L += _round_f(fk, m, s1)
            L += [f"ROLI {s2}, {a}, 5", f"ADD {s1}, {s1}, {s2}", f"ADD {s1}, {s1}, {e}"]
        L += [
            f"ADDI {s1}, {s1}, {k:#010x}",
            f"MOVI {s2}, g_wptr",
            f"LOAD {s2}, [{s2}]",
            f"LOAD {e}, [{s2}]",
            f"ADD {s1}, {s1}, {e}",
            f"ADDI {s2}, {s2}, 4",
            f"MOVI {e}, g_wptr",
            f"STORE [{e}], {s2}",
            f"MOV {e}, {d}",
            f"MOV {d}, {c}",
            *_rot(c, b, 30, idiom, s2),
            f"MOV {b}, {a}",
            f"MOV {a}, {s1}",
            f"MOVI {s2}, g_t",
            f"LOAD {s1}, [{s2}]",
            f"ADDI {s1}, {s1}, 1",
            f"STORE [{s2}], {s1}",
            f"MOVI {s2}, 20",
            f"BLTU {s1}, {s2}, {body}",
        ]
    L += [f"MOVI {s2}, g_h"]
    for i, reg in enumerate((a, b, c, d, e)):
        off = f"+{4 * i}" if i else ""
        L += [
            f"LOAD {s1}, [{s2}{off}]",
            f"ADD {s1}, {s1}, {reg}",
            f"STORE [{s2}{off}], {s1}",
        ]
    L.append("RET")
    return L


def _emit_proc(p: str, sched: str, rounds: str, noise: bool = False) -> list[str]:
    L = [f"{p}:"]
    if noise:
        L += ["MOV r6, r0", "MOV r0, r6"]
    L += [f"CALL {sched}", f"CALL {rounds}", "RET"]
    return L


def _emit_core(p: str, direct_proc: str | None = None) -> list[str]:
    """Streaming driver: r0 = message, r1 = length, r2 = digest out.

    Processes 64-byte chunks from the message, then 1..2 padded tail chunks
    built in tailbuf, then writes the big-endian digest words to the output.
    The chunk-processing routine is reached through the g_process pointer
    unless direct_proc is given.
    """
    if direct_proc:
        call_proc = [f"CALL {direct_proc}"]
    else:
        call_proc = ["MOVI r3, g_process", "LOAD r3, [r3]", "CALLR r3"]
    L = [
        f"{p}:",
        "MOVI r3, g_msg_ptr",
        "STORE [r3], r0",
        "MOVI r3, g_len_left",
        "STORE [r3], r1",
        "MOVI r3, g_total_len",
        "STORE [r3], r1",
        "MOVI r3, g_out_ptr",
        "STORE [r3], r2",
        "MOVI r3, g_h",
    ]
    for i, iv in enumerate(SHA1_IV):
        off = f"+{4 * i}" if i else ""
        L += [f"MOVI r4, {iv:#010x}", f"STORE [r3{off}], r4"]
    L += [
        f"{p}_chunks:",
        "MOVI r3, g_len_left",
        "LOAD r4, [r3]",
        "MOVI r5, 64",
        f"BLTU r4, r5, {p}_tail",
        "MOVI r3, g_msg_ptr",
        "LOAD r0, [r3]",
        *call_proc,
        "MOVI r3, g_msg_ptr",
        "LOAD r4, [r3]",
        "ADDI r4, r4, 64",
        "STORE [r3], r4",
        "MOVI r3, g_len_left",
        "LOAD r4, [r3]",
        "SUBI r4, r4, 64",
        "STORE [r3], r4",
        f"JMP {p}_chunks",
        # tail: r4 holds the remaining byte count (< 64)
        f"{p}_tail:",
        "MOVI r3, g_msg_ptr",
        "LOAD r1, [r3]",
        "MOVI r2, tailbuf",
        "MOVI r5, 0",
        f"{p}_copy:",
        f"BGEU r5, r4, {p}_mark",
        "ADD r6, r1, r5",
        "LOADB r3, [r6]",
        "ADD r6, r2, r5",
        "STOREB [r6], r3",
        "ADDI r5, r5, 1",
        f"JMP {p}_copy",
        f"{p}_mark:",
        "ADD r6, r2, r4",
        "MOVI r3, 0x80",
        "STOREB [r6], r3",
        "MOVI r0, 0",
        "ADDI r5, r4, 1",
        "MOVI r6, 56",
        f"BGEU r4, r6, {p}_two",
        "MOVI r6, 64",
        f"JMP {p}_zero",
        f"{p}_two:",
        "MOVI r6, 128",
        f"{p}_zero:",
        f"BGEU r5, r6, {p}_len",
        "ADD r3, r2, r5",
        "STOREB [r3], r0",
        "ADDI r5, r5, 1",
        f"JMP {p}_zero",
        # 64-bit big-endian bit length in the last 8 tail bytes
        f"{p}_len:",
        "MOVI r3, g_total_len",
        "LOAD r4, [r3]",
        "SHRI r1, r4, 29",
        "SHLI r4, r4, 3",
        "ADD r5, r2, r6",
        *_bswap("r0", "r1", "r3"),
        "STORE [r5-8], r0",
        *_bswap("r0", "r4", "r3"),
        "STORE [r5-4], r0",
        "MOVI r3, g_tail_limit",
        "STORE [r3], r6",
        "MOVI r3, g_tail_off",
        "MOVI r4, 0",
        "STORE [r3], r4",
        f"{p}_tchunks:",
        "MOVI r3, g_tail_off",
        "LOAD r4, [r3]",
        "MOVI r3, g_tail_limit",
        "LOAD r5, [r3]",
        f"BGEU r4, r5, {p}_final",
        "MOVI r0, tailbuf",
        "ADD r0, r0, r4",
        *call_proc,
        "MOVI r3, g_tail_off",
        "LOAD r4, [r3]",
        "ADDI r4, r4, 64",
        "STORE [r3], r4",
        f"JMP {p}_tchunks",
        f"{p}_final:",
        "MOVI r3, g_out_ptr",
        "LOAD r2, [r3]",
        "MOVI r1, g_h",
    ]
    for i in range(5):
        off = f"+{4 * i}" if i else ""
        L += [
            f"LOAD r4, [r1{off}]",
            *_bswap("r0", "r4", "r3"),
            f"STORE [r2{off}], r0",
        ]
    L.append("RET")
    return L


def _emit_send(p: str = "tpm_send") -> list[str]:
    """Streams the 20-byte buffer at r0 to the TPM DATA_FIFO."""
    return [
        f"{p}:",
        "MOVI r1, 0xFED40000",
        "ADDI r3, r0, 20",
        f"{p}_loop:",
        "LOAD r4, [r0]",
        "STORE [r1+0x24], r4",
        "ADDI r0, r0, 4",
        f"BLTU r0, r3, {p}_loop",
        "RET",
    ]


def _inline_send() -> list[str]:
    return [
        "MOVI r1, 0xFED40000",
        "ADDI r3, r0, 20",
        "o2_send_loop:",
        "LOAD r4, [r0]",
        "STORE [r1+0x24], r4",
        "ADDI r0, r0, 4",
        "BLTU r0, r3, o2_send_loop",
    ]


def _measure_args(end_label: str) -> list[str]:
    return [
        f"MOVI r0, {LOAD_BASE:#x}",
        f"MOVI r1, {end_label}",
        f"SUBI r1, r1, {LOAD_BASE:#x}",
        "MOVI r2, digest",
    ]


def _emit_driver(p: str, proc: str, style: str) -> list[str]:
    """Per-variant measurement pipeline entered from the dispatcher."""
    setup = [
        f"{p}:",
        "MOVI r7, stack_top",
        f"MOVI r3, {proc}",
        "MOVI r4, g_process",
        "STORE [r4], r3",
    ]
    if style == "wrapped":  # O0: abstraction layers and redundant moves
        return setup + [
            f"CALL {p}_measure",
            f"CALL {p}_report",
            "HALT",
            f"{p}_measure:",
            f"MOVI r5, {LOAD_BASE:#x}",
            "MOV r0, r5",
            "MOVI r1, measured_end",
            f"SUBI r1, r1, {LOAD_BASE:#x}",
            "MOVI r6, digest",
            "MOV r2, r6",
            "MOVI r5, g_dbg",
            "STORE [r5], r1",
            "CALL sha1_core",
            "RET",
            f"{p}_report:",
            "MOVI r5, digest",
            "MOV r0, r5",
            "CALL tpm_send",
            "RET",
        ]
    body = setup + _measure_args("measured_end") + ["CALL sha1_core", "MOVI r0, digest"]
    if style == "inline_send":  # O2
        return body + _inline_send() + ["HALT"]
    return body + ["CALL tpm_send", "HALT"]


def _benign_code() -> list[str]:
    """The shared code section: dispatcher, five pipelines, hash components."""
    L = [
        "dispatch:",
        "MOVI r1, selector",
        "LOAD r2, [r1]",
        "JMPR r2",
    ]
    L += _emit_driver("drv_o0", "proc_o0", "wrapped")
    L += _emit_driver("drv_o1", "proc_o1", "plain")
    L += _emit_driver("drv_o2", "proc_o2", "inline_send")
    L += _emit_driver("drv_o3", "proc_o3", "plain")
    L += _emit_driver("drv_os", "proc_os", "plain")
    L += _emit_core("sha1_core")
    L += _emit_proc("proc_o0", "sched_canon", "rounds_canon", noise=True)
    L += _emit_proc("proc_o1", "sched_shiftor", "rounds_shiftor")
    L += _emit_proc("proc_o2", "sched_canon", "rounds_renref")
    L += _emit_proc("proc_o3", "sched_unroll2", "rounds_canon")
    L += _emit_proc("proc_os", "sched_canon", "rounds_canon")
    L += _emit_sched("sched_canon")
    L += _emit_sched("sched_shiftor", idiom="shiftor")
    L += _emit_sched("sched_unroll2", unroll=2)
    L += _emit_rounds("rounds_canon")
    L += _emit_rounds("rounds_shiftor", idiom="shiftor")
    L += _emit_rounds("rounds_renref", regs=RENAMED_REGS, order="f_first")
    L += _emit_send()
    L.append("measured_end:")
    return L


def _emit_data(selector: str, golden_words=(0, 0, 0, 0, 0)) -> list[str]:
    words = " ".join(f"{w:#010x}" for w in golden_words)
    fake = " ".join(f"{w:#010x}" for w in A1_FAKE_WORDS)
    return [
        ".data",
        f"selector: .word {selector}",
        "g_process: .word 0",
        "g_msg_ptr: .word 0",
        "g_len_left: .word 0",
        "g_total_len: .word 0",
        "g_out_ptr: .word 0",
        "g_h: .word 0 0 0 0 0",
        "g_t: .word 0",
        "g_wptr: .word 0",
        "g_tail_limit: .word 0",
        "g_tail_off: .word 0",
        "g_dbg: .word 0",
        "digest: .word 0 0 0 0 0",
        "decoy: .word 0 0 0 0 0",
        "sideeffect: .word 0",
        f"golden_words: .word {words}",
        f"fake_words: .word {fake}",
        "g_w: .word " + " ".join(["0"] * 80),
        "tailbuf: .word " + " ".join(["0"] * 32),
        "stack: .word " + " ".join(["0"] * 16),
        "stack_top:",
    ]


def _assemble_padded(code_lines: list[str], data_lines: list[str], entry: str) -> FirmwareImage:
    """Assemble with the code section padded to SECTION_SIZE with HALT slots."""
    src = "\n".join([f".entry {entry}", *code_lines, *data_lines])
    probe = assemble(src)
    if len(probe.code) > SECTION_SIZE:
        raise ValueError(f"code section {len(probe.code)} exceeds {SECTION_SIZE}")
    pad = (SECTION_SIZE - len(probe.code)) // INSTR_SIZE
    src = "\n".join([f".entry {entry}", *code_lines, *(["HALT"] * pad), *data_lines])
    return assemble(src)


# ---------------------------------------------------------------------------
# attack emissions


def _standalone_hash(p: str, ks=SHA1_K) -> list[str]:
    """A self-contained canonical hash: core with a direct processing call."""
    L = _emit_core(f"{p}_sha1", direct_proc=f"{p}_proc")
    L += _emit_proc(f"{p}_proc", f"{p}_sched", f"{p}_rounds")
    L += _emit_sched(f"{p}_sched")
    L += _emit_rounds(f"{p}_rounds", ks=ks)
    return L


def _a1_code() -> list[str]:
    return [
        "a1_driver:",
        "MOVI r7, stack_top",
        "MOVI r0, fake_words",
        "CALL tpm_send",
        "HALT",
        *_emit_send(),
        "a1_measured_end:",
    ]


def _a2_code() -> list[str]:
    tampered = (SHA1_K[0] ^ 1, SHA1_K[1], SHA1_K[2], SHA1_K[3])
    return [
        "a2_driver:",
        "MOVI r7, stack_top",
        *_measure_args("a2_measured_end"),
        "CALL a2_sha1",
        "MOVI r0, digest",
        "CALL tpm_send",
        "HALT",
        *_standalone_hash("a2", ks=tampered),
        *_emit_send(),
        "a2_measured_end:",
    ]


def _a3_extra() -> list[str]:
    return [
        "hidden_fn:",
        "MOVI r3, sideeffect",
        "MOVI r4, 0x1337C0DE",
        "STORE [r3], r4",
        "JMP drv_os",
    ]


def _a4_extra() -> list[str]:
    return [
        "a4_driver:",
        "MOVI r7, stack_top",
        "MOVI r3, proc_os",
        "MOVI r4, g_process",
        "STORE [r4], r3",
        *_measure_args("measured_end"),
        "CALL sha1_core",
        "MOVI r0, digest",
        "CALL tpm_send",
        "HALT",
    ]


def _a5_code(golden_words: tuple[int, ...]) -> list[str]:
    L = [
        "a5_driver:",
        "MOVI r7, stack_top",
        *_measure_args("a5_measured_end"),
        "CALL a5_sha1",
        "MOVI r1, digest",
    ]
    for i, w in enumerate(golden_words):
        off = f"+{4 * i}" if i else ""
        L += [f"MOVI r2, {w:#010x}", f"STORE [r1{off}], r2"]
    L += [
        "MOVI r0, digest",
        "CALL tpm_send",
        "HALT",
        *_standalone_hash("a5"),
        *_emit_send(),
        "a5_measured_end:",
    ]
    return L


def _a6_code() -> list[str]:
    L = [
        "a6_driver:",
        "MOVI r7, stack_top",
        *_measure_args("a6_measured_end"),
        "CALL a6_sha1",
        "MOVI r1, digest",
        "MOVI r2, decoy",
    ]
    for i in range(5):
        off = f"+{4 * i}" if i else ""
        L += [f"LOAD r3, [r1{off}]", f"STORE [r2{off}], r3"]
    L += ["MOVI r2, golden_words"]
    for i in range(5):
        off = f"+{4 * i}" if i else ""
        L += [f"LOAD r3, [r2{off}]", f"STORE [r1{off}], r3"]
    L += [
        "MOVI r0, digest",
        "CALL tpm_send",
        "HALT",
        *_standalone_hash("a6"),
        *_emit_send(),
        "a6_measured_end:",
    ]
    return L


def _stress_code() -> list[str]:
    """Concretely short nested loops whose symbolic guards fork every pass."""
    return [
        "stress_driver:",
        "MOVI r7, stack_top",
        "MOVI r1, 0",
        "MOVI r2, 3000",
        "stress_spin:",
        "BEQ r5, r0, stress_skip",
        "ADDI r5, r5, 1",
        "stress_skip:",
        "ADDI r1, r1, 1",
        "BNE r1, r2, stress_spin",
        *_measure_args("stress_measured_end"),
        "CALL stress_sha1",
        "MOVI r0, digest",
        "CALL tpm_send",
        "HALT",
        *_standalone_hash("stress"),
        *_emit_send(),
        "stress_measured_end:",
    ]


# ---------------------------------------------------------------------------
# corpus assembly


def reference_hash_source() -> str:
    """Canonical schedule and rounds, assembled only for signature derivation."""
    lines = [
        ".entry ref_entry",
        "ref_entry: HALT",
        *_emit_sched("sched_canon"),
        *_emit_rounds("rounds_canon"),
        *_emit_data("ref_entry"),
    ]
    return "\n".join(lines)


def _all_pass() -> dict[str, str]:
    return {"P1": "pass", "P2": "pass", "P3": "pass", "P4": "pass"}


def _golden_chain(digest: bytes) -> str:
    return tpm_extend([ZERO_DIGEST] * 16, 0, digest)[0].hex()


def build_images() -> tuple[list[FixtureSpec], dict[str, FirmwareImage]]:
    """Construct every fixture image in memory with its manifest record."""
    benign = _benign_code()
    selectors = {"O0": "drv_o0", "O1": "drv_o1", "O2": "drv_o2", "O3": "drv_o3", "Os": "drv_os"}

    images: dict[str, FirmwareImage] = {}
    for variant, drv in selectors.items():
        images[f"B-{variant}"] = _assemble_padded(benign, _emit_data(drv), "dispatch")

    ref = images["B-Os"]
    measured_len = ref.symbols["measured_end"] - LOAD_BASE
    golden_digest = sha1(ref.code[:measured_len])
    golden_words = tuple(int.from_bytes(golden_digest[i : i + 4], "little") for i in range(0, 20, 4))
    golden_pcr0 = _golden_chain(golden_digest)
    benign_region = [{"start": LOAD_BASE, "length": measured_len}]

    specs: list[FixtureSpec] = []
    for variant in BENIGN_VARIANTS:
        fid = f"B-{variant}"
        specs.append(FixtureSpec(
            id=fid, kind="benign", variant=variant, file=f"b_{variant.lower()}.fw",
            expected=_all_pass(), designated=None,
            measured_manifest=benign_region, pcr_matches_manifest_chain=True,
            expected_pcr0=golden_pcr0,
            notes=f"shared code section, selector routes to {selectors[variant]}",
        ))

    # attacks
    images["A1"] = _assemble_padded(_a1_code(), _emit_data("a1_driver"), "a1_driver")
    images["A2"] = _assemble_padded(_a2_code(), _emit_data("a2_driver"), "a2_driver")
    images["A3"] = _assemble_padded(benign + _a3_extra(), _emit_data("hidden_fn"), "dispatch")
    images["A4"] = _assemble_padded(benign + _a4_extra(), _emit_data("a4_driver"), "dispatch")
    images["A5"] = _assemble_padded(_a5_code(golden_words), _emit_data("a5_driver"), "a5_driver")
    images["A6"] = _assemble_padded(_a6_code(), _emit_data("a6_driver", golden_words), "a6_driver")
    images["STRESS"] = _assemble_padded(_stress_code(), _emit_data("stress_driver"), "stress_driver")

    def own_region(fid: str, end_label: str) -> list[dict[str, int]]:
        return [{"start": LOAD_BASE, "length": images[fid].symbols[end_label] - LOAD_BASE}]

    a1_pcr0 = _golden_chain(b"".join(w.to_bytes(4, "little") for w in A1_FAKE_WORDS))
    fail_p2 = {"P1": "pass", "P2": "fail", "P3": "inconclusive", "P4": "inconclusive"}
    fail_p3 = {"P1": "pass", "P2": "pass", "P3": "fail", "P4": "pass"}
    fail_p4 = {"P1": "pass", "P2": "pass", "P3": "pass", "P4": "fail"}

    specs += [
        FixtureSpec(
            id="A1", kind="attack", variant="A1_NoHash", file="a1.fw",
            expected=fail_p2, designated="P2",
            measured_manifest=[], pcr_matches_manifest_chain=False,
            expected_pcr0=a1_pcr0,
            notes="no hash function; a constant block is streamed to the TPM",
        ),
        FixtureSpec(
            id="A2", kind="attack", variant="A2_TamperedSha1", file="a2.fw",
            expected=fail_p2, designated="P2",
            measured_manifest=own_region("A2", "a2_measured_end"),
            pcr_matches_manifest_chain=False, expected_pcr0=None,
            notes="first round constant flipped; digest differs from real SHA-1",
        ),
        FixtureSpec(
            id="A3", kind="attack", variant="A3_HiddenCode", file="a3.fw",
            expected=fail_p4, designated="P4",
            measured_manifest=benign_region, pcr_matches_manifest_chain=True,
            expected_pcr0=golden_pcr0,
            notes="hidden function beyond the measured range runs first, then "
                  "delegates to a benign pipeline; PCR0 matches the golden value",
        ),
        FixtureSpec(
            id="A4", kind="attack", variant="A4_ForgedParams", file="a4.fw",
            expected=fail_p4, designated="P4",
            measured_manifest=benign_region, pcr_matches_manifest_chain=True,
            expected_pcr0=golden_pcr0,
            notes="unmeasured driver measures the dormant legitimate section "
                  "and reports its golden fingerprint",
        ),
        FixtureSpec(
            id="A5", kind="attack", variant="A5_Overwrite", file="a5.fw",
            expected=fail_p3, designated="P3",
            measured_manifest=own_region("A5", "a5_measured_end"),
            pcr_matches_manifest_chain=False, expected_pcr0=golden_pcr0,
            notes="real measurement overwritten with golden constants before the send",
        ),
        FixtureSpec(
            id="A6", kind="attack", variant="A6_Decoy", file="a6.fw",
            expected=fail_p3, designated="P3",
            measured_manifest=own_region("A6", "a6_measured_end"),
            pcr_matches_manifest_chain=False, expected_pcr0=golden_pcr0,
            notes="real digest copied to a decoy buffer, forged golden value sent",
        ),
        FixtureSpec(
            id="STRESS", kind="stress", variant="STRESS_PathExplosion", file="stress.fw",
            expected={"P1": "inconclusive", "P2": "inconclusive",
                      "P3": "inconclusive", "P4": "inconclusive"},
            designated="P1",
            measured_manifest=own_region("STRESS", "stress_measured_end"),
            pcr_matches_manifest_chain=True, expected_pcr0=None,
            notes="symbolic loop guards defeat exploration; concrete run is short",
        ),
    ]

    return specs, images


def build_corpus(outdir: str | Path) -> list[FixtureSpec]:
    """Write all fixture images plus manifest.json; returns the manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    specs, images = build_images()
    manifest = []
    for spec in specs:
        blob = serialize(images[spec.id])
        (outdir / spec.file).write_bytes(blob)
        manifest.append(spec.to_json())
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return specs


def expected_verdict(spec: FixtureSpec) -> dict[str, str]:
    """Per-property expected statuses for a fixture."""
    if spec.kind == "benign":
        return _all_pass()
    if spec.variant in ("A1_NoHash", "A2_TamperedSha1"):
        return {"P1": "pass", "P2": "fail", "P3": "inconclusive", "P4": "inconclusive"}
    if spec.variant in ("A3_HiddenCode", "A4_ForgedParams"):
        return {"P1": "pass", "P2": "pass", "P3": "pass", "P4": "fail"}
    if spec.variant in ("A5_Overwrite", "A6_Decoy"):
        return {"P1": "pass", "P2": "pass", "P3": "fail", "P4": "pass"}
    if spec.kind == "stress":
        return dict(spec.expected)
    raise UnknownFixture(spec.variant)


def load_manifest(outdir: str | Path) -> list[FixtureSpec]:
    records = json.loads((Path(outdir) / "manifest.json").read_text())
    return [FixtureSpec(**r) for r in records]
