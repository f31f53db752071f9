"""Path-based symbolic execution over the firmware ISA.

Discovers TPM write instructions behind computed addresses and backs
indirect-jump resolution.  Registers start as fresh symbolic variables
(reset state is unspecified); memory reads through to the image bytes, so
input-free firmware concretizes quickly and only genuinely undetermined
state forks paths.  Constants are plain ints; only symbolic values pay for
expression nodes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .isa import INSTR_SIZE, LOAD_BASE, MASK32, FirmwareImage, Instruction
from .machine import TPM_DATA_FIFO, TPM_MMIO_BASE, TPM_MMIO_LAST

WORD_MAX = MASK32


class SymexError(Exception):
    pass


class SolverTimeout(SymexError):
    pass


class AnalysisTimeout(SymexError):
    """No TPM write found and the search was truncated by its budget."""


# ---------------------------------------------------------------------------
# expression language: SymValue = int | SymExpr, BoolValue = bool | BoolExpr


class SymExpr:
    """32-bit expression node; constants never appear as SymExpr."""

    __slots__ = ("op", "args", "_vars", "__weakref__")

    def __init__(self, op: str, args: tuple):
        self.op = op
        self.args = args
        self._vars = None

    def __repr__(self):
        if self.op == "var":
            return self.args[0]
        if self.op == "memread":
            return f"mem[{self.args[0]!r}]@{self.args[1]}"
        return f"({self.op} {' '.join(map(repr, self.args))})"


SymValue = "int | SymExpr"


def var(name: str) -> SymExpr:
    return SymExpr("var", (name,))


def free_vars(value) -> frozenset:
    """Free-variable keys: var names plus memread node identities."""
    if isinstance(value, int) or isinstance(value, bool):
        return frozenset()
    if value._vars is not None:
        return value._vars
    if value.op == "var":
        out = frozenset((value.args[0],))
    elif value.op == "memread":
        out = frozenset((value,)) | free_vars(value.args[0])
    else:
        out = frozenset()
        for a in value.args:
            out |= free_vars(a)
    value._vars = out
    return out


def _binop(op: str, a, b, fold):
    if isinstance(a, int) and isinstance(b, int):
        return fold(a, b)
    return SymExpr(op, (a, b))


def sym_add(a, b):
    if b == 0:
        return a
    if a == 0:
        return b
    return _binop("ADD", a, b, lambda x, y: (x + y) & MASK32)


def sym_sub(a, b):
    if b == 0:
        return a
    return _binop("SUB", a, b, lambda x, y: (x - y) & MASK32)


def sym_and(a, b):
    if a == 0 or b == 0:
        return 0
    if a == MASK32:
        return b
    if b == MASK32:
        return a
    return _binop("AND", a, b, lambda x, y: x & y)


def sym_or(a, b):
    if a == 0:
        return b
    if b == 0:
        return a
    return _binop("OR", a, b, lambda x, y: x | y)


def sym_xor(a, b):
    if a == 0:
        return b
    if b == 0:
        return a
    return _binop("XOR", a, b, lambda x, y: x ^ y)


def sym_shl(a, b):
    if b == 0:
        return a
    return _binop("SHL", a, b, lambda x, y: (x << (y & 31)) & MASK32)


def sym_shr(a, b):
    if b == 0:
        return a
    return _binop("SHR", a, b, lambda x, y: x >> (y & 31))


def sym_rol(a, b):
    if isinstance(b, int) and b & 31 == 0:
        return a
    def fold(x, y):
        s = y & 31
        return ((x << s) | (x >> (32 - s))) & MASK32
    return _binop("ROL", a, b, fold)


def sym_byte(value, index: int):
    """(value >> 8*index) & 0xFF as a first-class node for cheap reassembly."""
    if isinstance(value, int):
        return (value >> (8 * index)) & 0xFF
    return SymExpr("BYTE", (value, index))


ALU_BUILDERS = {
    "ADD": sym_add, "ADDI": sym_add,
    "SUB": sym_sub, "SUBI": sym_sub,
    "AND": sym_and, "ANDI": sym_and,
    "OR": sym_or, "ORI": sym_or,
    "XOR": sym_xor, "XORI": sym_xor,
    "SHL": sym_shl, "SHLI": sym_shl,
    "SHR": sym_shr, "SHRI": sym_shr,
    "ROL": sym_rol, "ROLI": sym_rol,
}


class BoolExpr:
    __slots__ = ("op", "args", "_vars")

    def __init__(self, op: str, args: tuple):
        self.op = op
        self.args = args
        self._vars = None

    def __repr__(self):
        return f"({self.op} {' '.join(map(repr, self.args))})"


def _relop(op: str, a, b, fold):
    if isinstance(a, int) and isinstance(b, int):
        return fold(a, b)
    return BoolExpr(op, (a, b))


def sym_eq(a, b):
    if a is b:
        return True
    return _relop("EQ", a, b, lambda x, y: x == y)


def sym_ne(a, b):
    if a is b:
        return False
    return _relop("NE", a, b, lambda x, y: x != y)


def sym_ltu(a, b):
    if b == 0:
        return False
    return _relop("LTU", a, b, lambda x, y: x < y)


def sym_geu(a, b):
    if b == 0:
        return True
    return _relop("GEU", a, b, lambda x, y: x >= y)


def bool_not(c):
    if isinstance(c, bool):
        return not c
    neg = {"EQ": "NE", "NE": "EQ", "LTU": "GEU", "GEU": "LTU"}
    if c.op in neg:
        return BoolExpr(neg[c.op], c.args)
    return BoolExpr("NOT", (c,))


def eval_value(value, env: dict) -> int:
    if isinstance(value, int):
        return value
    op = value.op
    if op == "var":
        return env[value.args[0]]
    if op == "memread":
        return env[value]
    if op == "BYTE":
        return (eval_value(value.args[0], env) >> (8 * value.args[1])) & 0xFF
    a = eval_value(value.args[0], env)
    b = eval_value(value.args[1], env)
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
    raise SymexError(f"cannot evaluate {op}")


def eval_bool(cond, env: dict) -> bool:
    if isinstance(cond, bool):
        return cond
    op = cond.op
    if op == "NOT":
        return not eval_bool(cond.args[0], env)
    if op == "BAND":
        return all(eval_bool(a, env) for a in cond.args)
    if op == "BOR":
        return any(eval_bool(a, env) for a in cond.args)
    a = eval_value(cond.args[0], env)
    b = eval_value(cond.args[1], env)
    if op == "EQ":
        return a == b
    if op == "NE":
        return a != b
    if op == "LTU":
        return a < b
    if op == "GEU":
        return a >= b
    raise SymexError(f"cannot evaluate {op}")


# ---------------------------------------------------------------------------
# solver: interval narrowing + bounded enumeration + bit-blasting fallback

ENUM_DOMAIN_CAP = 4096


@dataclass
class SolveResult:
    kind: str  # "sat" | "unsat" | "unknown"
    values: list[int] = field(default_factory=list)
    complete: bool = True

    @property
    def sat(self) -> bool:
        return self.kind == "sat"


UNSAT = SolveResult("unsat")
UNKNOWN = SolveResult("unknown", complete=False)


def _invert_affine(expr, const: int):
    """Solve expr == const for expr's single var when expr is a bijective
    chain of ADD/SUB/XOR with constant legs; returns (var_key, value) or None."""
    value = const
    while isinstance(expr, SymExpr) and expr.op in ("ADD", "SUB", "XOR"):
        a, b = expr.args
        if isinstance(b, int):
            inner, k = a, b
        elif isinstance(a, int) and expr.op != "SUB":
            inner, k = b, a
        else:
            return None
        if expr.op == "ADD":
            value = (value - k) & MASK32
        elif expr.op == "SUB":
            value = (value + k) & MASK32
        else:
            value = value ^ k
        expr = inner
    if isinstance(expr, SymExpr) and expr.op in ("var", "memread"):
        key = expr.args[0] if expr.op == "var" else expr
        return key, value
    return None


def _narrow_domains(constraints, keys):
    """Per-variable candidate intervals [lo, hi] and != exclusions."""
    dom = {k: [0, WORD_MAX, set()] for k in keys}

    def key_of(e):
        if isinstance(e, SymExpr) and e.op == "var":
            return e.args[0]
        if isinstance(e, SymExpr) and e.op == "memread":
            return e
        return None

    for c in constraints:
        if isinstance(c, bool) or c.op not in ("EQ", "NE", "LTU", "GEU"):
            continue
        a, b = c.args
        if isinstance(a, int):
            a, b = b, a
            if c.op == "LTU":  # const < var  ==  var >= const+1
                c = BoolExpr("GEU", (a, (b + 1) & MASK32))
                a, b = c.args
            elif c.op == "GEU":  # const >= var  ==  var < const+1
                c = BoolExpr("LTU", (a, (b + 1) & MASK32))
                a, b = c.args
        if not isinstance(b, int):
            continue
        k = key_of(a)
        if k is None:
            inv = _invert_affine(a, b)
            if inv and inv[0] in dom:
                if c.op == "EQ":
                    lo_hi = dom[inv[0]]
                    lo_hi[0] = max(lo_hi[0], inv[1])
                    lo_hi[1] = min(lo_hi[1], inv[1])
                elif c.op == "NE":
                    dom[inv[0]][2].add(inv[1])
            continue
        if k not in dom:
            continue
        lo_hi = dom[k]
        if c.op == "EQ":
            lo_hi[0] = max(lo_hi[0], b)
            lo_hi[1] = min(lo_hi[1], b)
        elif c.op == "LTU":
            lo_hi[1] = min(lo_hi[1], b - 1)
        elif c.op == "GEU":
            lo_hi[0] = max(lo_hi[0], b)
        elif c.op == "NE":
            lo_hi[2].add(b)
    return dom


def _probe_sat(constraints, expr, dom) -> SolveResult | None:
    """Cheap satisfying-assignment search for loose systems before blasting."""
    import itertools

    keys = sorted(dom, key=str)
    candidate_sets = []
    for k in keys:
        lo, hi, ne = dom[k]
        cands = {lo, hi, 0, 1, 2, WORD_MAX}
        for e in list(ne)[:4]:
            cands.update(((e + 1) & MASK32, (e - 1) & MASK32))
        cands = [c for c in sorted(cands) if lo <= c <= hi and c not in ne]
        if not cands:
            return None
        candidate_sets.append(cands[:8])
    tried = 0
    for combo in itertools.product(*candidate_sets):
        tried += 1
        if tried > 512:
            return None
        env = dict(zip(keys, combo))
        if all(eval_bool(c, env) for c in constraints):
            return SolveResult("sat", [eval_value(expr, env) if not isinstance(expr, int) else expr],
                               complete=False)
    return None


def solve(constraints, expr, limit: int = 64, deadline: float | None = None) -> SolveResult:
    """Enumerate concrete values of expr under the constraint conjunction.

    Returns sat with up to `limit` distinct values (complete=False when more
    exist), unsat, or unknown when the query exceeds the solver's reach.
    """
    constraints = tuple(c for c in constraints if not (isinstance(c, bool) and c))
    if any(c is False for c in constraints):
        return UNSAT
    # syntactic contradiction: a relation and its negation over identical nodes
    negation = {"EQ": "NE", "NE": "EQ", "LTU": "GEU", "GEU": "LTU"}
    seen_rels = set()
    for c in constraints:
        if c.op in negation:
            if (negation[c.op], id(c.args[0]), id(c.args[1])) in seen_rels:
                return UNSAT
            seen_rels.add((c.op, id(c.args[0]), id(c.args[1])))
    keys = free_vars(expr)
    for c in constraints:
        keys |= free_vars(c)
    if not keys:
        return SolveResult("sat", [expr if isinstance(expr, int) else eval_value(expr, {})])

    dom = _narrow_domains(constraints, keys)
    sizes = []
    for k in keys:
        lo, hi, ne = dom[k]
        if lo > hi:
            return UNSAT
        sizes.append(hi - lo + 1)
    total = 1
    for s in sizes:
        total *= s
        if total > ENUM_DOMAIN_CAP:
            if limit == 1:
                probed = _probe_sat(constraints, expr, dom)
                if probed is not None:
                    return probed
            return _solve_blasted(constraints, expr, keys, limit, deadline)

    ordered = sorted(keys, key=str)
    values: list[int] = []
    seen: set[int] = set()

    def rec(i: int, env: dict) -> bool:
        if deadline is not None and time.monotonic() > deadline:
            raise SolverTimeout()
        if i == len(ordered):
            if all(eval_bool(c, env) for c in constraints):
                v = eval_value(expr, env)
                if v not in seen:
                    seen.add(v)
                    values.append(v)
                    if len(values) > limit:
                        return True
            return False
        k = ordered[i]
        lo, hi, ne = dom[k]
        for cand in range(lo, hi + 1):
            if cand in ne:
                continue
            env[k] = cand
            if rec(i + 1, env):
                return True
        env.pop(k, None)
        return False

    try:
        overflow = rec(0, {})
    except SolverTimeout:
        return UNKNOWN
    if overflow:
        return SolveResult("sat", values[:limit], complete=False)
    if not values:
        return UNSAT
    return SolveResult("sat", sorted(values), complete=True)


def check_sat(constraints, deadline: float | None = None):
    """True / False / None (unknown)."""
    res = solve(constraints, 0, limit=1, deadline=deadline)
    if res.kind == "sat":
        return True
    if res.kind == "unsat":
        return False
    return None


# --- bit-blasting fallback (Tseitin to CNF, small DPLL) --------------------


class _Blaster:
    def __init__(self):
        self.nvars = 0
        self.clauses: list[tuple[int, ...]] = []
        self.word_cache: dict = {}
        self.gate_cache: dict = {}
        self.true_lit = self.new_var()
        self.clauses.append((self.true_lit,))

    def new_var(self) -> int:
        self.nvars += 1
        return self.nvars

    def const_bit(self, b: int) -> int:
        return self.true_lit if b else -self.true_lit

    def word(self, value, env: dict) -> list[int]:
        if isinstance(value, int):
            return [self.const_bit((value >> i) & 1) for i in range(32)]
        key = id(value)
        if key in self.word_cache:
            return self.word_cache[key]
        op = value.op
        if op in ("var", "memread"):
            k = value.args[0] if op == "var" else value
            if k not in env:
                env[k] = [self.new_var() for _ in range(32)]
            bits = env[k]
        elif op == "BYTE":
            inner = self.word(value.args[0], env)
            lo = 8 * value.args[1]
            bits = inner[lo : lo + 8] + [self.const_bit(0)] * 24
        elif op in ("AND", "OR", "XOR"):
            xa, xb = (self.word(a, env) for a in value.args)
            bits = [self._gate(op, xa[i], xb[i]) for i in range(32)]
        elif op == "ADD":
            bits = self._adder(self.word(value.args[0], env), self.word(value.args[1], env))
        elif op == "SUB":
            xb = [-b for b in self.word(value.args[1], env)]
            bits = self._adder(self.word(value.args[0], env), xb, carry_in=self.const_bit(1))
        elif op in ("SHL", "SHR", "ROL") and isinstance(value.args[1], int):
            xa = self.word(value.args[0], env)
            s = value.args[1] & 31
            zero = self.const_bit(0)
            if op == "SHL":
                bits = [zero] * s + xa[: 32 - s]
            elif op == "SHR":
                bits = xa[s:] + [zero] * s
            else:
                bits = xa[32 - s :] + xa[: 32 - s] if s else xa
        else:
            raise SolverTimeout(f"cannot blast {op}")
        self.word_cache[key] = bits
        return bits

    def _gate(self, op: str, a: int, b: int) -> int:
        key = (op, a, b) if a <= b else (op, b, a)
        cached = self.gate_cache.get(key)
        if cached is not None:
            return cached
        o = self.new_var()
        if op == "AND":
            self.clauses += [(-o, a), (-o, b), (o, -a, -b)]
        elif op == "OR":
            self.clauses += [(o, -a), (o, -b), (-o, a, b)]
        else:  # XOR
            self.clauses += [(-o, a, b), (-o, -a, -b), (o, -a, b), (o, a, -b)]
        self.gate_cache[key] = o
        return o

    def _adder(self, xa, xb, carry_in=None):
        carry = carry_in if carry_in is not None else self.const_bit(0)
        out = []
        for i in range(32):
            s1 = self._gate("XOR", xa[i], xb[i])
            out.append(self._gate("XOR", s1, carry))
            c1 = self._gate("AND", xa[i], xb[i])
            c2 = self._gate("AND", s1, carry)
            carry = self._gate("OR", c1, c2)
        return out

    def bool_lit(self, cond, env: dict) -> int:
        if isinstance(cond, bool):
            return self.const_bit(cond)
        op = cond.op
        if op == "NOT":
            return -self.bool_lit(cond.args[0], env)
        if op in ("BAND", "BOR"):
            lits = [self.bool_lit(a, env) for a in cond.args]
            o = self.new_var()
            if op == "BAND":
                for lit in lits:
                    self.clauses.append((-o, lit))
                self.clauses.append(tuple([o] + [-lit for lit in lits]))
            else:
                for lit in lits:
                    self.clauses.append((o, -lit))
                self.clauses.append(tuple([-o] + lits))
            return o
        xa = self.word(cond.args[0], env)
        xb = self.word(cond.args[1], env)
        if op in ("EQ", "NE"):
            diffs = [self._gate("XOR", xa[i], xb[i]) for i in range(32)]
            any_diff = self.new_var()
            for d in diffs:
                self.clauses.append((any_diff, -d))
            self.clauses.append(tuple([-any_diff] + diffs))
            return any_diff if op == "NE" else -any_diff
        # LTU/GEU: borrow chain of xa - xb
        lt = self.const_bit(0)
        for i in range(32):
            eq_i = -self._gate("XOR", xa[i], xb[i])
            lt_i = self._gate("AND", -xa[i], xb[i])
            keep = self._gate("AND", eq_i, lt)
            lt = self._gate("OR", lt_i, keep)
        return lt if op == "LTU" else -lt


def _dpll(clauses: list[tuple[int, ...]], nvars: int, deadline: float | None) -> dict | None:
    assign: dict[int, bool] = {}
    stack: list[tuple[int, bool, bool]] = []  # (var, value, flipped)

    def value_of(lit):
        v = assign.get(abs(lit))
        if v is None:
            return None
        return v if lit > 0 else not v

    def propagate() -> bool:
        changed = True
        while changed:
            changed = False
            for cl in clauses:
                unassigned = None
                satisfied = False
                count = 0
                for lit in cl:
                    v = value_of(lit)
                    if v is True:
                        satisfied = True
                        break
                    if v is None:
                        unassigned = lit
                        count += 1
                if satisfied:
                    continue
                if count == 0:
                    return False
                if count == 1:
                    assign[abs(unassigned)] = unassigned > 0
                    stack.append((abs(unassigned), unassigned > 0, True))
                    changed = True
        return True

    steps = 0
    while True:
        steps += 1
        if deadline is not None and steps % 64 == 0 and time.monotonic() > deadline:
            raise SolverTimeout()
        if not propagate():
            # backtrack to last decision
            while stack:
                v, val, flipped = stack.pop()
                del assign[v]
                if not flipped:
                    assign[v] = not val
                    stack.append((v, not val, True))
                    break
            else:
                return None
            continue
        free = None
        for v in range(1, nvars + 1):
            if v not in assign:
                free = v
                break
        if free is None:
            return dict(assign)
        assign[free] = False
        stack.append((free, False, False))


def _solve_blasted(constraints, expr, keys, limit, deadline) -> SolveResult:
    try:
        bl = _Blaster()
        env: dict = {}
        for c in constraints:
            bl.clauses.append((bl.bool_lit(c, env),))
        out_bits = bl.word(expr, env) if not isinstance(expr, int) else None
        values: list[int] = []
        while len(values) <= limit:
            model = _dpll(bl.clauses, bl.nvars, deadline)
            if model is None:
                break
            if out_bits is None:
                return SolveResult("sat", [expr])
            v = sum(1 << i for i in range(32) if model.get(abs(out_bits[i]), False) == (out_bits[i] > 0))
            values.append(v)
            # block this output value
            bl.clauses.append(tuple(-b if ((v >> i) & 1) else b for i, b in enumerate(out_bits)))
        if not values:
            return UNSAT
        if len(values) > limit:
            return SolveResult("sat", sorted(values[:limit]), complete=False)
        return SolveResult("sat", sorted(values), complete=True)
    except SolverTimeout:
        return UNKNOWN
    except RecursionError:
        return UNKNOWN


# ---------------------------------------------------------------------------
# symbolic machine state and exploration


@dataclass
class ExplorationConfig:
    timeout_seconds: float = 600.0
    max_states: int = 512
    max_depth: int = 4_000_000
    loop_bound: int = 2
    solution_cap: int = 64
    indirect_fork_cap: int = 8

    def __post_init__(self):
        for name in ("timeout_seconds", "max_states", "max_depth", "loop_bound",
                     "solution_cap", "indirect_fork_cap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TpmWriteEvent:
    instr_addr: int
    value: object  # SymValue written
    path_constraints: tuple
    path: tuple[int, ...]
    must: bool

    def __repr__(self):
        tag = "must" if self.must else "may"
        return f"TpmWriteEvent(0x{self.instr_addr:08x}, {tag})"


class SymState:
    __slots__ = ("regs", "pc", "smem", "constraints", "depth", "call_depth",
                 "fork_counts", "path", "havoc_epoch", "memread_serial",
                 "collect_hits", "steps_since_collect")

    def __init__(self, regs, pc, smem, constraints=(), depth=0, call_depth=0,
                 fork_counts=None, path=None, havoc_epoch=0, memread_serial=0,
                 collect_hits=0, steps_since_collect=0):
        self.regs = regs
        self.pc = pc
        self.smem = smem
        self.constraints = constraints
        self.depth = depth
        self.call_depth = call_depth
        self.fork_counts = fork_counts if fork_counts is not None else {}
        self.path = path if path is not None else []
        self.havoc_epoch = havoc_epoch
        self.memread_serial = memread_serial
        self.collect_hits = collect_hits
        self.steps_since_collect = steps_since_collect

    def fork(self, constraint) -> "SymState":
        return SymState(
            regs=list(self.regs),
            pc=self.pc,
            smem=dict(self.smem),
            constraints=self.constraints + (constraint,),
            depth=self.depth,
            call_depth=self.call_depth,
            fork_counts=dict(self.fork_counts),
            path=list(self.path),
            havoc_epoch=self.havoc_epoch,
            memread_serial=self.memread_serial,
            collect_hits=self.collect_hits,
            steps_since_collect=self.steps_since_collect,
        )


class _ImageMemory:
    """Read-only initial memory: code and data sections at their bases."""

    def __init__(self, image: FirmwareImage):
        self.code = image.code
        self.data = image.data
        self.code_base = LOAD_BASE
        self.code_end = LOAD_BASE + len(image.code)
        self.data_base = image.data_base
        self.data_end = image.data_base + len(image.data)

    def byte(self, addr: int):
        if self.code_base <= addr < self.code_end:
            return self.code[addr - self.code_base]
        if self.data_base <= addr < self.data_end:
            return self.data[addr - self.data_base]
        return None


TRUNCATION_REASONS = {"depth", "states", "deadline", "loop_bound", "indirect",
                      "collect_cap", "collect_window"}


@dataclass
class ExploreOutcome:
    events: list[TpmWriteEvent]
    visited: set[int]
    exhausted: bool
    collected: list = field(default_factory=list)
    truncations: set[str] = field(default_factory=set)


class Explorer:
    def __init__(self, image: FirmwareImage, config: ExplorationConfig):
        self.image = image
        self.config = config
        self.memory = _ImageMemory(image)
        self.insts: dict[int, Instruction] = {i.addr: i for i in image.instructions()}
        self._deadline: float | None = None

    # -- memory helpers ------------------------------------------------------

    def _load(self, state: SymState, addr, size: int):
        if isinstance(addr, int):
            if TPM_MMIO_BASE <= addr <= TPM_MMIO_LAST:
                return 0
            parts = []
            for i in range(size):
                a = addr + i
                b = state.smem.get(a)
                if b is None:
                    if state.havoc_epoch:
                        return self._fresh_memread(state, addr)
                    b = self.memory.byte(a)
                    if b is None:
                        return None  # fault
                parts.append(b)
            if size == 1:
                return parts[0]
            if all(isinstance(p, int) for p in parts):
                return parts[0] | (parts[1] << 8) | (parts[2] << 16) | (parts[3] << 24)
            # reassemble a word stored symbolically
            first = parts[0]
            if (isinstance(first, SymExpr) and first.op == "BYTE" and first.args[1] == 0
                    and all(isinstance(p, SymExpr) and p.op == "BYTE"
                            and p.args[0] is first.args[0] and p.args[1] == i
                            for i, p in enumerate(parts))):
                return first.args[0]
            value = parts[0]
            for i in range(1, 4):
                value = sym_or(value, sym_shl(parts[i], 8 * i))
            return value
        # symbolic address: try to concretize
        res = solve(state.constraints, addr, limit=self.config.indirect_fork_cap,
                    deadline=self._deadline)
        if res.sat and res.complete and len(res.values) == 1:
            return self._load(state, res.values[0], size)
        return self._fresh_memread(state, addr)

    def _fresh_memread(self, state: SymState, addr):
        state.memread_serial += 1
        return SymExpr("memread", (addr, (state.havoc_epoch, state.memread_serial)))

    def _store(self, state: SymState, addr, value, size: int) -> bool:
        """Returns False on a definite fault."""
        if isinstance(addr, int):
            if TPM_MMIO_BASE <= addr <= TPM_MMIO_LAST:
                return True  # device write; no memory effect
            smem = state.smem
            for i in range(size):
                a = addr + i
                if a not in smem and self.memory.byte(a) is None and not state.havoc_epoch:
                    return False
            if size == 1:
                smem[addr] = sym_and(value, 0xFF) if not isinstance(value, int) else value & 0xFF
            else:
                if isinstance(value, int):
                    for i in range(4):
                        smem[addr + i] = (value >> (8 * i)) & 0xFF
                else:
                    for i in range(4):
                        smem[addr + i] = sym_byte(value, i)
            return True
        res = solve(state.constraints, addr, limit=self.config.indirect_fork_cap,
                    deadline=self._deadline)
        if res.sat and res.complete and len(res.values) == 1:
            return self._store(state, res.values[0], value, size)
        if res.sat and res.complete:
            # weak update: clobber every candidate with an unknown byte
            for base in res.values:
                for i in range(size):
                    state.smem[base + i] = sym_byte(self._fresh_memread(state, base), i)
            return True
        # unbounded symbolic store: all prior knowledge is invalidated
        state.havoc_epoch += 1
        state.smem.clear()
        return True

    # -- main loop ------------------------------------------------------------

    def explore(self, entry: int, *, initial_regs=None, collect_at=None,
                stop_on_collect=True, collect_cap: int | None = None,
                collect_window: int | None = None) -> ExploreOutcome:
        cfg = self.config
        deadline = time.monotonic() + cfg.timeout_seconds
        self._deadline = deadline
        regs = list(initial_regs) if initial_regs is not None else [var(f"r{i}_0") for i in range(8)]
        start = SymState(regs=regs, pc=entry, smem={}, path=[entry])
        stack = [start]
        out = ExploreOutcome(events=[], visited=set(), exhausted=True)
        states_seen = 0

        while stack:
            state = stack.pop()
            states_seen += 1
            if states_seen > cfg.max_states:
                out.truncations.add("states")
                break
            reason = self._run_state(state, stack, out, collect_at, stop_on_collect,
                                     collect_cap, collect_window, deadline)
            if reason in TRUNCATION_REASONS:
                out.truncations.add(reason)
            if reason == "deadline":
                break
        out.exhausted = not out.truncations
        return out

    def _run_state(self, state, stack, out, collect_at, stop_on_collect,
                   collect_cap, collect_window, deadline) -> str:
        cfg = self.config
        insts = self.insts
        events = out.events
        visited = out.visited
        collected = out.collected
        while True:
            if time.monotonic() > deadline:
                return "deadline"
            if state.depth >= cfg.max_depth:
                return "depth"
            if collect_at is not None and state.pc in collect_at:
                collected.append((state.pc, tuple(state.regs), state.constraints, tuple(state.path)))
                if stop_on_collect:
                    return "done"
                state.collect_hits += 1
                state.steps_since_collect = 0
                if collect_cap is not None and state.collect_hits >= collect_cap:
                    return "collect_cap"
            elif collect_at is not None:
                state.steps_since_collect += 1
                if (collect_window is not None and state.collect_hits
                        and state.steps_since_collect > collect_window):
                    return "collect_window"
            inst = insts.get(state.pc)
            if inst is None:
                return "dead"  # left the code section or unaligned
            visited.add(state.pc)
            state.depth += 1
            op = inst.opcode
            regs = state.regs
            next_pc = state.pc + INSTR_SIZE

            if op == "MOVI":
                regs[inst.rd] = inst.imm
            elif op == "MOV":
                regs[inst.rd] = regs[inst.rs1]
            elif op in ALU_BUILDERS:
                build = ALU_BUILDERS[op]
                rhs = inst.imm if op.endswith("I") and op != "MOVI" else regs[inst.rs2]
                regs[inst.rd] = build(regs[inst.rs1], rhs)
            elif op == "LOAD" or op == "LOADB":
                addr = sym_add(regs[inst.rs1], inst.imm)
                value = self._load(state, addr, 4 if op == "LOAD" else 1)
                if value is None:
                    return "dead"
                regs[inst.rd] = value
            elif op == "STORE" or op == "STOREB":
                size = 4 if op == "STORE" else 1
                addr = sym_add(regs[inst.rs1], inst.imm)
                value = regs[inst.rs2]
                self._note_tpm_write(state, inst, addr, value, deadline, events)
                if not self._store(state, addr, value, size):
                    return "dead"
            elif op in ("BEQ", "BNE", "BLTU", "BGEU"):
                cond = {
                    "BEQ": sym_eq, "BNE": sym_ne, "BLTU": sym_ltu, "BGEU": sym_geu,
                }[op](regs[inst.rs1], regs[inst.rs2])
                if isinstance(cond, bool):
                    if cond:
                        next_pc = inst.imm
                    state.path.append(next_pc)
                else:
                    count = state.fork_counts.get(inst.addr, 0)
                    if count >= cfg.loop_bound:
                        return "loop_bound"
                    state.fork_counts[inst.addr] = count + 1
                    taken = state.fork(cond)
                    taken.pc = inst.imm
                    taken.path.append(inst.imm)
                    if check_sat(taken.constraints, deadline) is not False:
                        stack.append(taken)
                    state.constraints = state.constraints + (bool_not(cond),)
                    state.path.append(next_pc)
                    if check_sat(state.constraints, deadline) is False:
                        return "done"
            elif op == "JMP":
                next_pc = inst.imm
                state.path.append(next_pc)
            elif op == "JMPR" or op == "CALLR" or op == "RET":
                if op == "RET":
                    if state.call_depth == 0:
                        return "dead"
                    target = self._load(state, regs[7], 4)
                    if target is None:
                        return "dead"
                    regs[7] = sym_add(regs[7], 4)
                    state.call_depth -= 1
                else:
                    target = regs[inst.rs1]
                if op == "CALLR":
                    if not self._push_return(state, next_pc):
                        return "dead"
                    state.call_depth += 1
                if isinstance(target, int):
                    next_pc = target
                    state.path.append(next_pc)
                else:
                    res = solve(state.constraints, target, limit=cfg.indirect_fork_cap,
                                deadline=deadline)
                    if not (res.sat and res.complete):
                        return "indirect"
                    for t in res.values[1:]:
                        forked = state.fork(sym_eq(target, t))
                        forked.pc = t
                        forked.path.append(t)
                        stack.append(forked)
                    state.constraints = state.constraints + (sym_eq(target, res.values[0]),)
                    next_pc = res.values[0]
                    state.path.append(next_pc)
            elif op == "CALL":
                if not self._push_return(state, next_pc):
                    return "dead"
                state.call_depth += 1
                next_pc = inst.imm
                state.path.append(next_pc)
            elif op == "HALT":
                return "done"

            state.pc = next_pc

    def _push_return(self, state: SymState, return_pc: int) -> bool:
        sp = sym_sub(state.regs[7], 4)
        state.regs[7] = sp
        return self._store(state, sp, return_pc, 4)

    def _note_tpm_write(self, state, inst, addr, value, deadline, events) -> None:
        if isinstance(addr, int):
            if addr == TPM_DATA_FIFO:
                events.append(TpmWriteEvent(inst.addr, value, state.constraints,
                                            tuple(state.path), must=True))
            return
        eq = sym_eq(addr, TPM_DATA_FIFO)
        sat_eq = check_sat(state.constraints + (eq,), deadline)
        if sat_eq is False:
            return
        sat_ne = check_sat(state.constraints + (sym_ne(addr, TPM_DATA_FIFO),), deadline)
        must = sat_eq is True and sat_ne is False
        events.append(TpmWriteEvent(inst.addr, value, state.constraints,
                                    tuple(state.path), must=must))


def explore(image: FirmwareImage, entry: int, config: ExplorationConfig | None = None,
            **kwargs) -> ExploreOutcome:
    """Depth-bounded forked exploration from entry; records TPM write events."""
    return Explorer(image, config or ExplorationConfig()).explore(entry, **kwargs)


def find_tpm_writes(image: FirmwareImage,
                    config: ExplorationConfig | None = None) -> list[TpmWriteEvent]:
    """All instructions that write the TPM DATA_FIFO, deduplicated and sorted.

    Raises AnalysisTimeout when nothing was found but the search was cut
    short, so "none exists" stays distinguishable from "not found in budget".
    """
    outcome = explore(image, image.entry, config)
    best: dict[int, TpmWriteEvent] = {}
    for ev in outcome.events:
        cur = best.get(ev.instr_addr)
        if cur is None or (ev.must and not cur.must):
            best[ev.instr_addr] = ev
    if not best and not outcome.exhausted:
        raise AnalysisTimeout("TPM write search truncated before any event was found")
    return [best[a] for a in sorted(best)]
