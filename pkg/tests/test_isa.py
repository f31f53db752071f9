import random

import pytest

from bootkeeper import isa
from bootkeeper.isa import (
    AddressRange,
    AsmSyntaxError,
    BadMagic,
    DuplicateLabel,
    EntryOutOfRange,
    FirmwareImage,
    Instruction,
    LOAD_BASE,
    RegisterOutOfRange,
    UndefinedLabel,
    UnknownOpcode,
    assemble,
    decode,
    encode,
    load_image,
    normalize_ranges,
    serialize,
    subtract_ranges,
)


def test_decode_movi():
    inst = decode(bytes.fromhex("010000002a000000"), 0x100000)
    assert inst.opcode == "MOVI" and inst.rd == 0 and inst.imm == 42
    assert inst.addr == 0x100000


def test_decode_halt():
    assert decode(b"\x00" * 8, 0x100000).opcode == "HALT"


def test_decode_store():
    inst = decode(bytes.fromhex("2100010224000000"), 0x100000)
    assert inst.opcode == "STORE"
    assert inst.rs1 == 1 and inst.rs2 == 2 and inst.imm == 0x24


def test_decode_unknown_opcode():
    with pytest.raises(UnknownOpcode):
        decode(b"\xee" + b"\x00" * 7, 0x100000)


def test_decode_register_out_of_range():
    with pytest.raises(RegisterOutOfRange):
        decode(bytes.fromhex("0109000000000000"), 0x100000)


def test_encode_movi_deadbeef():
    inst = Instruction("MOVI", rd=3, imm=0xDEADBEEF)
    assert encode(inst) == bytes.fromhex("01030000efbeadde")


def test_encode_ret():
    assert encode(Instruction("RET")) == bytes.fromhex("4200000000000000")


def test_encode_decode_roundtrip_random():
    rng = random.Random(0xB007)
    opcodes = sorted(isa.MNEMONICS)
    for _ in range(1000):
        inst = Instruction(
            opcode=rng.choice(opcodes),
            rd=rng.randrange(8),
            rs1=rng.randrange(8),
            rs2=rng.randrange(8),
            imm=rng.randrange(1 << 32),
            addr=LOAD_BASE + 8 * rng.randrange(1024),
        )
        again = decode(encode(inst), inst.addr)
        assert again == inst


def test_decode_encode_identity_on_bytes():
    rng = random.Random(7)
    for _ in range(500):
        raw = bytes(
            [rng.choice(sorted(isa.OPCODES)), rng.randrange(8), rng.randrange(8), rng.randrange(8)]
        ) + rng.randbytes(4)
        assert encode(decode(raw, LOAD_BASE)) == raw


def test_assemble_minimal():
    img = assemble(".entry start\nstart: HALT\n")
    assert img.entry == LOAD_BASE
    assert len(img.code) == 8
    assert img.code[:1] == b"\x00"


def test_assemble_forward_branch():
    img = assemble(
        """
        .entry start
        start:
            BEQ r0, r0, end
            MOVI r1, 1
        end:
            HALT
        """
    )
    branch = decode(img.code[:8], LOAD_BASE)
    assert branch.opcode == "BEQ"
    assert branch.imm == LOAD_BASE + 16


def test_assemble_data_labels_and_mem_operands():
    img = assemble(
        """
        .entry start
        start:
            MOVI r1, buf
            LOAD r2, [r1+4]
            STORE [r1-4], r2
            HALT
        .data
        buf: .word 0x11223344, 0x55667788
        bytes: .byte 1 2 3
        """
    )
    assert img.data[:4] == bytes.fromhex("44332211")
    assert img.data[4:8] == bytes.fromhex("88776655")
    assert img.data[8:11] == b"\x01\x02\x03"
    movi = decode(img.code[:8], LOAD_BASE)
    assert movi.imm == img.data_base
    store = decode(img.code[16:24], LOAD_BASE + 16)
    assert store.imm == 0xFFFFFFFC  # -4 wrapped


def test_assemble_is_deterministic():
    src = ".entry start\nstart: MOVI r1, 5\n  ADD r2, r1, r1\n  HALT\n"
    assert serialize(assemble(src)) == serialize(assemble(src))


def test_assemble_undefined_label():
    with pytest.raises(UndefinedLabel):
        assemble("start: JMP nowhere\n")


def test_assemble_duplicate_label():
    with pytest.raises(DuplicateLabel):
        assemble("a: HALT\na: HALT\n")


def test_assemble_syntax_error_reports_line():
    with pytest.raises(AsmSyntaxError) as exc:
        assemble("start: HALT\n FROB r1\n")
    assert exc.value.line_no == 2


def test_serialize_load_roundtrip():
    img = assemble(".entry start\nstart: MOVI r1, 7\nHALT\n.data\nx: .word 9\n")
    again = load_image(serialize(img))
    assert again.entry == img.entry
    assert again.code == img.code
    assert again.data == img.data


def test_container_header_layout():
    img = assemble(".entry start\nstart: MOVI r1, 7\nHALT\n.data\nx: .word 9\n")
    blob = serialize(img)
    assert blob[0:4] == b"FWIM"
    assert int.from_bytes(blob[4:8], "little") == 1  # version
    assert int.from_bytes(blob[8:12], "little") == img.entry
    assert int.from_bytes(blob[12:16], "little") == 32  # code offset
    assert int.from_bytes(blob[16:20], "little") == len(img.code)
    assert int.from_bytes(blob[20:24], "little") == 32 + len(img.code)
    assert int.from_bytes(blob[24:28], "little") == len(img.data)
    assert int.from_bytes(blob[28:32], "little") == 0  # reserved
    assert blob[32 : 32 + len(img.code)] == img.code
    assert blob[32 + len(img.code) :] == img.data


def test_load_image_bad_magic():
    blob = b"XXXX" + serialize(assemble("start: HALT\n"))[4:]
    with pytest.raises(BadMagic):
        load_image(blob)


def test_load_image_entry_out_of_range():
    img = assemble("start: HALT\n")
    blob = bytearray(serialize(img))
    blob[8:12] = (0x200000).to_bytes(4, "little")  # entry field
    with pytest.raises(EntryOutOfRange):
        load_image(bytes(blob))


def test_load_image_truncated():
    img = assemble("start: HALT\n")
    with pytest.raises(isa.TruncatedImage):
        load_image(serialize(img)[:20])


def test_range_arithmetic():
    base = [AddressRange(0x100, 0x100)]
    holes = [AddressRange(0x120, 0x10), AddressRange(0x1F0, 0x20)]
    got = subtract_ranges(base, holes)
    assert got == [AddressRange(0x100, 0x20), AddressRange(0x130, 0xC0)]
    assert normalize_ranges([AddressRange(0, 4), AddressRange(4, 4)]) == [AddressRange(0, 8)]
    assert subtract_ranges(base, base) == []


def test_address_range_invariants():
    with pytest.raises(ValueError):
        AddressRange(0, 0)
    with pytest.raises(ValueError):
        AddressRange(0xFFFFFFFF, 2)


def test_firmware_image_invariants():
    with pytest.raises(EntryOutOfRange):
        FirmwareImage(entry=LOAD_BASE + 8, code=b"\x00" * 8).validate()
    with pytest.raises(isa.ImageError):
        FirmwareImage(entry=LOAD_BASE, code=b"\x00" * 12).validate()
