"""Firmware virtual ISA: instruction encoding, image container, assembler.

Eight 32-bit registers (r7 is the stack pointer by calling convention),
fixed 8-byte instruction words, little-endian immediates.  Images load at
a fixed base; the data section follows the code section rounded up to 16.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

LOAD_BASE = 0x0010_0000
MAGIC = b"FWIM"
VERSION = 1
HEADER_SIZE = 32
MAX_IMAGE_SIZE = 64 * 1024
INSTR_SIZE = 8

# opcode byte -> mnemonic
OPCODES = {
    0x00: "HALT",
    0x01: "MOVI",
    0x02: "MOV",
    0x03: "ADD",
    0x04: "SUB",
    0x05: "AND",
    0x06: "OR",
    0x07: "XOR",
    0x08: "SHL",
    0x09: "SHR",
    0x0A: "ROL",
    0x0B: "ADDI",
    0x0C: "SUBI",
    0x0D: "ANDI",
    0x0E: "ORI",
    0x0F: "XORI",
    0x10: "SHLI",
    0x11: "SHRI",
    0x12: "ROLI",
    0x20: "LOAD",
    0x21: "STORE",
    0x22: "LOADB",
    0x23: "STOREB",
    0x40: "JMP",
    0x41: "JMPR",
    0x42: "RET",
    0x43: "CALL",
    0x44: "CALLR",
    0x45: "BEQ",
    0x46: "BNE",
    0x47: "BLTU",
    0x48: "BGEU",
}
MNEMONICS = {name: op for op, name in OPCODES.items()}

ALU_REG_OPS = {"ADD", "SUB", "AND", "OR", "XOR", "SHL", "SHR", "ROL"}
ALU_IMM_OPS = {"ADDI", "SUBI", "ANDI", "ORI", "XORI", "SHLI", "SHRI", "ROLI"}
BRANCH_OPS = {"BEQ", "BNE", "BLTU", "BGEU"}
MASK32 = 0xFFFFFFFF


class IsaError(Exception):
    pass


class UnknownOpcode(IsaError):
    def __init__(self, byte0: int, addr: int | None = None):
        self.byte0 = byte0
        self.addr = addr
        loc = f" at 0x{addr:08x}" if addr is not None else ""
        super().__init__(f"unknown opcode 0x{byte0:02x}{loc}")


class RegisterOutOfRange(IsaError):
    def __init__(self, value: int):
        self.value = value
        super().__init__(f"register index {value} out of range (0-7)")


class AsmError(IsaError):
    pass


class AsmSyntaxError(AsmError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class UndefinedLabel(AsmError):
    def __init__(self, name: str, line_no: int):
        self.name = name
        super().__init__(f"line {line_no}: undefined label {name!r}")


class DuplicateLabel(AsmError):
    def __init__(self, name: str, line_no: int):
        self.name = name
        super().__init__(f"line {line_no}: duplicate label {name!r}")


class ImageError(IsaError):
    pass


class BadMagic(ImageError):
    pass


class BadVersion(ImageError):
    pass


class TruncatedImage(ImageError):
    pass


class EntryOutOfRange(ImageError):
    pass


@dataclass(frozen=True)
class Instruction:
    opcode: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    addr: int = 0

    def __str__(self) -> str:
        return f"{self.addr:08x}: {self.opcode} rd={self.rd} rs1={self.rs1} rs2={self.rs2} imm=0x{self.imm:x}"


@dataclass(frozen=True, order=True)
class AddressRange:
    start: int
    length: int

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"range length must be positive, got {self.length}")
        if self.start + self.length > 1 << 32:
            raise ValueError("range wraps the 32-bit address space")

    @property
    def end(self) -> int:
        return self.start + self.length

    def contains(self, addr: int, size: int = 1) -> bool:
        return self.start <= addr and addr + size <= self.end


def normalize_ranges(ranges: list[AddressRange]) -> list[AddressRange]:
    """Merge overlapping/adjacent ranges into a sorted minimal list."""
    out: list[AddressRange] = []
    for r in sorted(ranges):
        if out and r.start <= out[-1].end:
            if r.end > out[-1].end:
                out[-1] = AddressRange(out[-1].start, r.end - out[-1].start)
        else:
            out.append(r)
    return out


def subtract_ranges(base: list[AddressRange], holes: list[AddressRange]) -> list[AddressRange]:
    """Byte-exact set difference base minus holes."""
    result: list[AddressRange] = []
    holes = normalize_ranges(holes)
    for b in normalize_ranges(base):
        cur = b.start
        for h in holes:
            if h.end <= cur or h.start >= b.end:
                continue
            if h.start > cur:
                result.append(AddressRange(cur, h.start - cur))
            cur = max(cur, h.end)
        if cur < b.end:
            result.append(AddressRange(cur, b.end - cur))
    return result


def ranges_cover(cover: list[AddressRange], target: AddressRange) -> bool:
    return not subtract_ranges([target], cover)


def decode(bytes8: bytes, addr: int) -> Instruction:
    """Decode one 8-byte unit at the given absolute address."""
    if len(bytes8) != INSTR_SIZE:
        raise TruncatedImage(f"instruction unit at 0x{addr:08x} is {len(bytes8)} bytes")
    op, rd, rs1, rs2 = bytes8[0], bytes8[1], bytes8[2], bytes8[3]
    if op not in OPCODES:
        raise UnknownOpcode(op, addr)
    for reg in (rd, rs1, rs2):
        if reg > 7:
            raise RegisterOutOfRange(reg)
    imm = struct.unpack_from("<I", bytes8, 4)[0]
    return Instruction(OPCODES[op], rd, rs1, rs2, imm, addr)


def encode(inst: Instruction) -> bytes:
    for reg in (inst.rd, inst.rs1, inst.rs2):
        if not 0 <= reg <= 7:
            raise RegisterOutOfRange(reg)
    return bytes((MNEMONICS[inst.opcode], inst.rd, inst.rs1, inst.rs2)) + struct.pack("<I", inst.imm & MASK32)


@dataclass
class FirmwareImage:
    entry: int
    code: bytes
    data: bytes = b""

    magic: bytes = field(default=MAGIC, repr=False)
    version: int = field(default=VERSION, repr=False)
    # label -> absolute address, populated by the assembler; not part of the
    # wire format and excluded from equality
    symbols: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def load_base(self) -> int:
        return LOAD_BASE

    @property
    def data_base(self) -> int:
        return LOAD_BASE + ((len(self.code) + 15) // 16) * 16

    @property
    def code_range(self) -> AddressRange:
        return AddressRange(LOAD_BASE, len(self.code))

    def validate(self) -> None:
        if self.magic != MAGIC:
            raise BadMagic(f"bad magic {self.magic!r}")
        if self.version != VERSION:
            raise BadVersion(f"unsupported version {self.version}")
        if len(self.code) % INSTR_SIZE:
            raise ImageError(f"code size {len(self.code)} not a multiple of {INSTR_SIZE}")
        if HEADER_SIZE + len(self.code) + len(self.data) > MAX_IMAGE_SIZE:
            raise ImageError("image exceeds 64 KiB")
        if not (LOAD_BASE <= self.entry < LOAD_BASE + len(self.code)):
            raise EntryOutOfRange(f"entry 0x{self.entry:08x} outside code section")

    def instructions(self) -> list[Instruction]:
        return [
            decode(self.code[off : off + INSTR_SIZE], LOAD_BASE + off)
            for off in range(0, len(self.code), INSTR_SIZE)
        ]


def serialize(image: FirmwareImage) -> bytes:
    image.validate()
    header = MAGIC + struct.pack(
        "<IIIIII",
        VERSION,
        image.entry,
        HEADER_SIZE,
        len(image.code),
        HEADER_SIZE + len(image.code),
        len(image.data),
    ) + struct.pack("<I", 0)
    return header + image.code + image.data


def load_image(blob: bytes) -> FirmwareImage:
    if len(blob) < HEADER_SIZE:
        raise TruncatedImage(f"file is {len(blob)} bytes, header needs {HEADER_SIZE}")
    if blob[:4] != MAGIC:
        raise BadMagic(f"bad magic {blob[:4]!r}")
    version, entry, code_off, code_size, data_off, data_size = struct.unpack_from("<IIIIII", blob, 4)
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if code_off + code_size > len(blob) or data_off + data_size > len(blob):
        raise TruncatedImage("section extends past end of file")
    image = FirmwareImage(entry=entry, code=blob[code_off : code_off + code_size],
                          data=blob[data_off : data_off + data_size])
    image.validate()
    return image


def _parse_number(tok: str, line_no: int) -> int:
    try:
        value = int(tok, 0)
    except ValueError:
        raise AsmSyntaxError(line_no, f"bad number {tok!r}") from None
    return value & MASK32


class _Operand:
    """Immediate operand: number, or label resolved in pass two."""

    def __init__(self, tok: str, line_no: int):
        self.line_no = line_no
        tok = tok.strip()
        if tok and (tok[0].isdigit() or tok[0] in "+-"):
            self.value, self.label = _parse_number(tok, line_no), None
        else:
            self.value, self.label = 0, tok

    def resolve(self, labels: dict[str, int]) -> int:
        if self.label is None:
            return self.value
        if self.label not in labels:
            raise UndefinedLabel(self.label, self.line_no)
        return labels[self.label]


def _parse_reg(tok: str, line_no: int) -> int:
    tok = tok.strip().lower()
    if len(tok) == 2 and tok[0] == "r" and tok[1].isdigit() and int(tok[1]) <= 7:
        return int(tok[1])
    raise AsmSyntaxError(line_no, f"expected register r0-r7, got {tok!r}")


def _parse_mem(tok: str, line_no: int) -> tuple[int, _Operand]:
    tok = tok.strip()
    if not (tok.startswith("[") and tok.endswith("]")):
        raise AsmSyntaxError(line_no, f"expected memory operand [rN+imm], got {tok!r}")
    body = tok[1:-1].strip()
    for sep in ("+", "-"):
        idx = body.find(sep)
        if idx > 0:
            base = _parse_reg(body[:idx], line_no)
            off = _Operand(sep + body[idx + 1 :] if sep == "-" else body[idx + 1 :], line_no)
            return base, off
    return _parse_reg(body, line_no), _Operand("0", line_no)


def assemble(source: str) -> FirmwareImage:
    """Assemble `.fasm` text into a firmware image.

    Grammar: `label:` definitions, one instruction per line, `.data` to
    switch sections, `.word`/`.byte` emitters, `.entry label`, `#` comments.
    """
    # (section, offset) per label; instruction/data items for pass two
    label_pos: dict[str, tuple[str, int]] = {}
    code_items: list[tuple[str, list, int]] = []  # (mnemonic, operands, line_no)
    data_items: list[tuple[str, list[_Operand]]] = []
    section = "code"
    code_off = 0
    data_off = 0
    entry_ref: _Operand | None = None

    for line_no, raw in enumerate(source.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        while line:
            head, colon, rest = line.partition(":")
            if colon and head and " " not in head and "[" not in head and not head[0].isdigit():
                name = head.strip()
                if name in label_pos:
                    raise DuplicateLabel(name, line_no)
                label_pos[name] = (section, code_off if section == "code" else data_off)
                line = rest.strip()
                continue
            break
        if not line:
            continue
        if line.startswith("."):
            parts = line.split(None, 1)
            directive = parts[0]
            arg = parts[1] if len(parts) > 1 else ""
            if directive == ".data":
                section = "data"
            elif directive == ".entry":
                if not arg:
                    raise AsmSyntaxError(line_no, ".entry needs a label")
                entry_ref = _Operand(arg, line_no)
            elif directive in (".word", ".byte"):
                if section != "data":
                    raise AsmSyntaxError(line_no, f"{directive} outside .data section")
                values = [_Operand(t, line_no) for t in arg.replace(",", " ").split()]
                if not values:
                    raise AsmSyntaxError(line_no, f"{directive} needs at least one value")
                data_items.append((directive, values))
                data_off += len(values) * (4 if directive == ".word" else 1)
            else:
                raise AsmSyntaxError(line_no, f"unknown directive {directive}")
            continue
        if section != "code":
            raise AsmSyntaxError(line_no, "instructions must appear before .data")
        parts = line.split(None, 1)
        mnemonic = parts[0].upper()
        if mnemonic not in MNEMONICS:
            raise AsmSyntaxError(line_no, f"unknown mnemonic {parts[0]!r}")
        operands = [t.strip() for t in parts[1].split(",")] if len(parts) > 1 else []
        code_items.append((mnemonic, operands, line_no))
        code_off += INSTR_SIZE

    data_base = LOAD_BASE + ((code_off + 15) // 16) * 16
    labels = {
        name: (LOAD_BASE + off if sec == "code" else data_base + off)
        for name, (sec, off) in label_pos.items()
    }

    code = bytearray()
    for idx, (mnemonic, operands, line_no) in enumerate(code_items):
        addr = LOAD_BASE + idx * INSTR_SIZE
        code += encode(_build_instruction(mnemonic, operands, line_no, addr, labels))

    data = bytearray()
    for directive, values in data_items:
        for v in values:
            n = v.resolve(labels)
            if directive == ".word":
                data += struct.pack("<I", n & MASK32)
            else:
                if n > 0xFF:
                    raise AsmSyntaxError(v.line_no, f".byte value 0x{n:x} exceeds one byte")
                data.append(n)

    entry = entry_ref.resolve(labels) if entry_ref is not None else LOAD_BASE
    image = FirmwareImage(entry=entry, code=bytes(code), data=bytes(data), symbols=labels)
    image.validate()
    return image


def _build_instruction(mnemonic: str, ops: list[str], line_no: int, addr: int,
                       labels: dict[str, int]) -> Instruction:
    def need(n: int) -> None:
        if len(ops) != n:
            raise AsmSyntaxError(line_no, f"{mnemonic} takes {n} operand(s), got {len(ops)}")

    def imm_of(tok: str) -> int:
        return _Operand(tok, line_no).resolve(labels)

    if mnemonic in ("HALT", "RET"):
        need(0)
        return Instruction(mnemonic, addr=addr)
    if mnemonic == "MOVI":
        need(2)
        return Instruction(mnemonic, rd=_parse_reg(ops[0], line_no), imm=imm_of(ops[1]), addr=addr)
    if mnemonic == "MOV":
        need(2)
        return Instruction(mnemonic, rd=_parse_reg(ops[0], line_no), rs1=_parse_reg(ops[1], line_no), addr=addr)
    if mnemonic in ALU_REG_OPS:
        need(3)
        return Instruction(mnemonic, rd=_parse_reg(ops[0], line_no), rs1=_parse_reg(ops[1], line_no),
                           rs2=_parse_reg(ops[2], line_no), addr=addr)
    if mnemonic in ALU_IMM_OPS:
        need(3)
        return Instruction(mnemonic, rd=_parse_reg(ops[0], line_no), rs1=_parse_reg(ops[1], line_no),
                           imm=imm_of(ops[2]), addr=addr)
    if mnemonic in ("LOAD", "LOADB"):
        need(2)
        base, off = _parse_mem(ops[1], line_no)
        return Instruction(mnemonic, rd=_parse_reg(ops[0], line_no), rs1=base,
                           imm=off.resolve(labels), addr=addr)
    if mnemonic in ("STORE", "STOREB"):
        need(2)
        base, off = _parse_mem(ops[0], line_no)
        return Instruction(mnemonic, rs1=base, rs2=_parse_reg(ops[1], line_no),
                           imm=off.resolve(labels), addr=addr)
    if mnemonic in ("JMP", "CALL"):
        need(1)
        return Instruction(mnemonic, imm=imm_of(ops[0]), addr=addr)
    if mnemonic in ("JMPR", "CALLR"):
        need(1)
        return Instruction(mnemonic, rs1=_parse_reg(ops[0], line_no), addr=addr)
    if mnemonic in BRANCH_OPS:
        need(3)
        return Instruction(mnemonic, rs1=_parse_reg(ops[0], line_no), rs2=_parse_reg(ops[1], line_no),
                           imm=imm_of(ops[2]), addr=addr)
    raise AsmSyntaxError(line_no, f"unhandled mnemonic {mnemonic}")
