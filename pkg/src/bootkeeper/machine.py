"""Concrete interpreter for the firmware ISA with a memory-mapped TPM device.

Serves as the runtime ground truth for the static analyses: it executes an
image from its entry point, logs every MMIO write to the TPM range, applies
the PCR extend rule when a full 20-byte measurement has been streamed to the
DATA_FIFO address, and records a dynamic def-use (taint) tag for every value.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

from .isa import INSTR_SIZE, LOAD_BASE, MASK32, FirmwareImage, Instruction, decode

TPM_MMIO_BASE = 0xFED4_0000
TPM_MMIO_LAST = 0xFED4_0FFF
TPM_DATA_FIFO = 0xFED4_0024
PCR_COUNT = 16
DIGEST_SIZE = 20
ZERO_DIGEST = b"\x00" * DIGEST_SIZE


class MachineError(Exception):
    pass


class MemFault(MachineError):
    def __init__(self, addr: int):
        self.addr = addr
        super().__init__(f"access to unmapped address 0x{addr:08x}")


class UnalignedPc(MachineError):
    def __init__(self, pc: int):
        self.pc = pc
        super().__init__(f"pc 0x{pc:08x} is not 8-aligned")


class StackUnderflow(MachineError):
    def __init__(self, pc: int):
        super().__init__(f"RET with empty call stack at 0x{pc:08x}")


class StepBudgetExceeded(MachineError):
    def __init__(self, steps: int):
        self.steps = steps
        super().__init__(f"step budget of {steps} exhausted before HALT")


class IndexOutOfRange(MachineError):
    pass


def sha1(message: bytes) -> bytes:
    """Reference H for the extend rule."""
    return hashlib.sha1(message).digest()


def tpm_extend(pcrs: list[bytes], index: int, m: bytes) -> list[bytes]:
    """PCR update: new[index] = sha1(old[index] || m); others unchanged."""
    if not 0 <= index < PCR_COUNT:
        raise IndexOutOfRange(f"PCR index {index} out of range")
    if len(m) != DIGEST_SIZE:
        raise ValueError(f"measurement must be {DIGEST_SIZE} bytes, got {len(m)}")
    out = list(pcrs)
    out[index] = sha1(pcrs[index] + m)
    return out


def extend_chain(measurements: list[bytes], index: int = 0) -> bytes:
    """Fold of tpm_extend over a measurement sequence, from all-zero PCRs."""
    pcrs = [ZERO_DIGEST] * PCR_COUNT
    for m in measurements:
        pcrs = tpm_extend(pcrs, index, m)
    return pcrs[index]


class TpmDevice:
    """PCR bank, 20-byte DATA_FIFO, and a log of every MMIO write."""

    def __init__(self):
        self.pcrs: list[bytes] = [ZERO_DIGEST] * PCR_COUNT
        self.fifo = bytearray()
        self.access_log: list[tuple[int, int, int]] = []  # (step, addr, value)

    def mmio_write(self, step: int, addr: int, value: int, size: int) -> None:
        self.access_log.append((step, addr, value))
        if addr == TPM_DATA_FIFO and size == 4:
            self.fifo += value.to_bytes(4, "little")
            if len(self.fifo) == DIGEST_SIZE:
                self.pcrs = tpm_extend(self.pcrs, 0, bytes(self.fifo))
                self.fifo.clear()

    @property
    def pcr0_hex(self) -> str:
        return self.pcrs[0].hex()


class TaintArena:
    """Hash-consed union DAG over instruction addresses.

    Taint sets grow with every ALU step, so they are kept as shared union
    nodes and only flattened to a real set on demand.
    """

    EMPTY = 0

    def __init__(self):
        self._nodes: list[tuple[int | None, int, int]] = [(None, 0, 0)]
        self._leaves: dict[int, int] = {}
        self._unions: dict[tuple[int, int], int] = {}

    def leaf(self, addr: int) -> int:
        node = self._leaves.get(addr)
        if node is None:
            node = len(self._nodes)
            self._nodes.append((addr, 0, 0))
            self._leaves[addr] = node
        return node

    def union(self, a: int, b: int) -> int:
        if a == b or b == 0:
            return a
        if a == 0:
            return b
        key = (a, b) if a < b else (b, a)
        node = self._unions.get(key)
        if node is None:
            node = len(self._nodes)
            self._nodes.append((None, key[0], key[1]))
            self._unions[key] = node
        return node

    def tag(self, node: int, addr: int) -> int:
        return self.union(node, self.leaf(addr))

    def to_set(self, node: int) -> frozenset[int]:
        out: set[int] = set()
        stack = [node]
        seen = {0}
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            addr, left, right = self._nodes[n]
            if addr is not None:
                out.add(addr)
            else:
                stack.append(left)
                stack.append(right)
        return frozenset(out)


@dataclass
class TraceEntry:
    step: int
    pc: int
    instr: Instruction
    written_addr: int | None = None
    written_value: int | None = None
    value_taint: int = 0  # taint node of the written value


@dataclass
class ExecutionTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    arena: TaintArena = field(default_factory=TaintArena)
    reg_taint: list[int] = field(default_factory=lambda: [0] * 8)
    mem_taint: dict[int, int] = field(default_factory=dict)

    def taint_of_store(self, step: int) -> frozenset[int]:
        entry = self.entries[step]
        if entry.written_addr is None:
            raise ValueError(f"step {step} is not a store")
        return self.arena.to_set(entry.value_taint)

    def pc_of_step(self, step: int) -> int:
        return self.entries[step].pc


@dataclass
class MachineState:
    regs: list[int]
    pc: int
    mem: dict[int, int]
    halted: bool = False
    step_count: int = 0
    call_depth: int = 0


def _load_memory(image: FirmwareImage) -> dict[int, int]:
    mem: dict[int, int] = {}
    for off, byte in enumerate(image.code):
        mem[LOAD_BASE + off] = byte
    base = image.data_base
    for off, byte in enumerate(image.data):
        mem[base + off] = byte
    return mem


def initial_state(image: FirmwareImage) -> MachineState:
    image.validate()
    return MachineState(regs=[0] * 8, pc=image.entry, mem=_load_memory(image))


class Machine:
    """One execution of an image; owns its state, TPM, and trace.

    record=False skips the per-step trace entries (taint is still tracked);
    useful when only the final state matters.
    """

    def __init__(self, image: FirmwareImage, record: bool = True):
        self.image = image
        self.state = initial_state(image)
        self.tpm = TpmDevice()
        self.trace = ExecutionTrace()
        self.record = record
        self._code_end = LOAD_BASE + len(image.code)
        self._decoded: list[Instruction | None] = [None] * (len(image.code) // INSTR_SIZE)

    def _fetch(self, pc: int) -> Instruction:
        if pc & 7:
            raise UnalignedPc(pc)
        if not LOAD_BASE <= pc < self._code_end:
            raise MemFault(pc)
        slot = (pc - LOAD_BASE) >> 3
        inst = self._decoded[slot]
        if inst is None:
            mem = self.state.mem
            raw = bytes(mem[pc + i] for i in range(INSTR_SIZE))
            inst = decode(raw, pc)
            self._decoded[slot] = inst
        return inst

    def _load(self, addr: int, size: int) -> int:
        if TPM_MMIO_BASE <= addr <= TPM_MMIO_LAST:
            return 0
        mem = self.state.mem
        value = 0
        for i in range(size):
            byte = mem.get(addr + i)
            if byte is None:
                raise MemFault(addr + i)
            value |= byte << (8 * i)
        return value

    def _store(self, addr: int, value: int, size: int, taint: int) -> None:
        state = self.state
        if TPM_MMIO_BASE <= addr <= TPM_MMIO_LAST:
            self.tpm.mmio_write(state.step_count, addr, value, size)
            return
        mem = state.mem
        for i in range(size):
            if addr + i not in mem:
                raise MemFault(addr + i)
        mem_taint = self.trace.mem_taint
        for i in range(size):
            mem[addr + i] = (value >> (8 * i)) & 0xFF
            mem_taint[addr + i] = taint
        if addr < self._code_end and addr + size > LOAD_BASE:
            for a in range(max(addr, LOAD_BASE), min(addr + size, self._code_end)):
                self._decoded[(a - LOAD_BASE) >> 3] = None

    def _mem_taint(self, addr: int, size: int) -> int:
        arena = self.trace.arena
        mem_taint = self.trace.mem_taint
        node = 0
        for i in range(size):
            node = arena.union(node, mem_taint.get(addr + i, 0))
        return node

    def step(self) -> None:
        state = self.state
        if state.halted:
            raise MachineError("machine already halted")
        inst = self._fetch(state.pc)
        regs = state.regs
        taints = self.trace.reg_taint
        arena = self.trace.arena
        op = inst.opcode
        here = inst.addr
        next_pc = state.pc + INSTR_SIZE
        written_addr = written_value = None
        value_taint = 0

        if op == "MOVI":
            regs[inst.rd] = inst.imm
            taints[inst.rd] = arena.leaf(here)
        elif op == "MOV":
            regs[inst.rd] = regs[inst.rs1]
            taints[inst.rd] = arena.tag(taints[inst.rs1], here)
        elif op in _ALU2:
            a, b = regs[inst.rs1], regs[inst.rs2]
            regs[inst.rd] = _ALU2[op](a, b)
            taints[inst.rd] = arena.tag(arena.union(taints[inst.rs1], taints[inst.rs2]), here)
        elif op in _ALU2I:
            regs[inst.rd] = _ALU2I[op](regs[inst.rs1], inst.imm)
            taints[inst.rd] = arena.tag(taints[inst.rs1], here)
        elif op == "LOAD" or op == "LOADB":
            size = 4 if op == "LOAD" else 1
            addr = (regs[inst.rs1] + inst.imm) & MASK32
            regs[inst.rd] = self._load(addr, size)
            taints[inst.rd] = arena.tag(self._mem_taint(addr, size), here)
        elif op == "STORE" or op == "STOREB":
            size = 4 if op == "STORE" else 1
            addr = (regs[inst.rs1] + inst.imm) & MASK32
            value = regs[inst.rs2] & (MASK32 if size == 4 else 0xFF)
            value_taint = taints[inst.rs2]
            self._store(addr, value, size, arena.tag(value_taint, here))
            written_addr, written_value = addr, value
        elif op == "BEQ":
            if regs[inst.rs1] == regs[inst.rs2]:
                next_pc = inst.imm
        elif op == "BNE":
            if regs[inst.rs1] != regs[inst.rs2]:
                next_pc = inst.imm
        elif op == "BLTU":
            if regs[inst.rs1] < regs[inst.rs2]:
                next_pc = inst.imm
        elif op == "BGEU":
            if regs[inst.rs1] >= regs[inst.rs2]:
                next_pc = inst.imm
        elif op == "JMP":
            next_pc = inst.imm
        elif op == "JMPR":
            next_pc = regs[inst.rs1]
        elif op == "CALL" or op == "CALLR":
            sp = (regs[7] - 4) & MASK32
            self._store(sp, next_pc, 4, arena.leaf(here))
            regs[7] = sp
            state.call_depth += 1
            next_pc = inst.imm if op == "CALL" else regs[inst.rs1]
        elif op == "RET":
            if state.call_depth == 0:
                raise StackUnderflow(state.pc)
            next_pc = self._load(regs[7], 4)
            regs[7] = (regs[7] + 4) & MASK32
            state.call_depth -= 1
        elif op == "HALT":
            state.halted = True
        else:  # pragma: no cover - table is closed
            raise MachineError(f"unhandled opcode {op}")

        if self.record:
            self.trace.entries.append(
                TraceEntry(state.step_count, state.pc, inst, written_addr, written_value, value_taint)
            )
        state.step_count += 1
        if not state.halted:
            state.pc = next_pc

    def run(self, max_steps: int, stop_at: set[int] | None = None,
            deadline: float | None = None) -> None:
        state = self.state
        while not state.halted:
            if stop_at and state.pc in stop_at:
                return
            if state.step_count >= max_steps:
                raise StepBudgetExceeded(max_steps)
            if deadline is not None and state.step_count % 4096 == 0 \
                    and time.monotonic() > deadline:
                raise StepBudgetExceeded(state.step_count)
            self.step()


def rol32(a: int, b: int) -> int:
    s = b & 31
    return ((a << s) | (a >> (32 - s))) & MASK32 if s else a


_ALU2 = {
    "ADD": lambda a, b: (a + b) & MASK32,
    "SUB": lambda a, b: (a - b) & MASK32,
    "AND": lambda a, b: a & b,
    "OR": lambda a, b: a | b,
    "XOR": lambda a, b: a ^ b,
    "SHL": lambda a, b: (a << (b & 31)) & MASK32,
    "SHR": lambda a, b: a >> (b & 31),
    "ROL": rol32,
}
_ALU2I = {
    "ADDI": _ALU2["ADD"],
    "SUBI": _ALU2["SUB"],
    "ANDI": _ALU2["AND"],
    "ORI": _ALU2["OR"],
    "XORI": _ALU2["XOR"],
    "SHLI": _ALU2["SHL"],
    "SHRI": _ALU2["SHR"],
    "ROLI": _ALU2["ROL"],
}


def step(state: MachineState, tpm: TpmDevice, image: FirmwareImage):
    """Execute one instruction against existing state; returns (state, tpm)."""
    m = Machine(image)
    m.state, m.tpm = state, tpm
    m.step()
    return m.state, m.tpm


def run(image: FirmwareImage, max_steps: int,
        stop_at: set[int] | None = None) -> tuple[MachineState, TpmDevice, ExecutionTrace]:
    """Execute from entry until HALT, a stop address, or the step budget."""
    m = Machine(image)
    m.run(max_steps, stop_at=stop_at)
    return m.state, m.tpm, m.trace
