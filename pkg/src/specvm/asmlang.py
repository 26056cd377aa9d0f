"""Assembler for the register machine.

Line-oriented syntax. One instruction, label or directive per line, with
`;` starting a comment. Labels are `name:` either alone on a line or in
front of an instruction. Registers are r0..r7, immediates are decimal or
0x hex, memory operands are `[rN]`, `[rN+imm]` or `[rN-imm]`.

Directives:

    .mem N          memory size in bytes (default 4096)
    .input S L      input region: start byte, length
    .output S L     output region: start byte, length
    .entry LABEL    entry point (default: first instruction)

Instructions:

    li rd, imm            rd = imm
    mov rd, rs            rd = rs
    ld rd, [rs+imm]       rd = 8 bytes little endian
    ldb rd, [rs+imm]      rd = one byte zero extended
    st [rs+imm], rv       store 8 bytes
    stb [rs+imm], rv      store low byte
    add|sub|mul|div|mod rd, rs, rt
    and|or|xor|shl|shr rd, rs, rt
    addi rd, rs, imm
    cmp rs, rt            flags = sign(rs - rt)
    jmp L / jlt|jle|jeq|jne|jge|jgt L
    hash rd, rs           64-bit avalanche mix of rs
    halt

Parsing either returns a complete Program or raises AsmError with a list
of diagnostics; there are no partially built programs.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _interp as I

DEFAULT_MEMSIZE = 4096

_ALU3 = {
    "add": I.OP_ADD, "sub": I.OP_SUB, "mul": I.OP_MUL, "div": I.OP_DIV,
    "mod": I.OP_MOD, "and": I.OP_AND, "or": I.OP_OR, "xor": I.OP_XOR,
    "shl": I.OP_SHL, "shr": I.OP_SHR,
}
_JCC = {
    "jlt": I.OP_JLT, "jle": I.OP_JLE, "jeq": I.OP_JEQ,
    "jne": I.OP_JNE, "jge": I.OP_JGE, "jgt": I.OP_JGT,
}
_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1


@dataclass
class Diagnostic:
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


class AsmError(Exception):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        msg = "; ".join(str(d) for d in self.diagnostics[:5])
        if len(self.diagnostics) > 5:
            msg += f" (+{len(self.diagnostics) - 5} more)"
        super().__init__(msg)


@dataclass
class Program:
    """A parsed program: encoded instructions plus layout metadata."""

    code: np.ndarray                    # (n, 4) int64: op, a, b, c
    entry: int
    memsize: int
    input_region: tuple                 # (start, length)
    output_region: tuple
    labels: dict
    lines: list = field(default_factory=list, repr=False)
    _live: list = field(default=None, repr=False, compare=False)

    @property
    def n_instructions(self):
        return self.code.shape[0]


def _parse_int(tok):
    t = tok.lower()
    neg = t.startswith("-")
    if neg:
        t = t[1:]
    if t.startswith("0x"):
        v = int(t, 16)
    else:
        v = int(t, 10)
    return -v if neg else v


def _reg(tok, line, diags):
    t = tok.strip().lower()
    if len(t) == 2 and t[0] == "r" and t[1].isdigit():
        idx = int(t[1])
        if idx < 8:
            return idx
    diags.append(Diagnostic(line, f"expected register r0..r7, got {tok!r}"))
    return 0


def _imm(tok, line, diags):
    try:
        v = _parse_int(tok.strip())
    except ValueError:
        diags.append(Diagnostic(line, f"bad immediate {tok!r}"))
        return 0
    if not _INT64_MIN <= v <= _INT64_MAX:
        diags.append(Diagnostic(line, f"immediate {tok} out of int64 range"))
        return 0
    return v


def _memop(tok, line, diags):
    """Parse [rN], [rN+imm], [rN-imm] into (reg, offset)."""
    t = tok.strip()
    if not (t.startswith("[") and t.endswith("]")):
        diags.append(Diagnostic(line, f"expected memory operand, got {tok!r}"))
        return 0, 0
    inner = t[1:-1].strip()
    for sep in ("+", "-"):
        pos = inner.find(sep, 1)
        if pos > 0:
            r = _reg(inner[:pos], line, diags)
            off = _imm(inner[pos:] if sep == "-" else inner[pos + 1:],
                       line, diags)
            return r, off
    return _reg(inner, line, diags), 0


def parse(text):
    """Assemble source text into a Program. Raises AsmError on any problem."""
    diags = []
    memsize = DEFAULT_MEMSIZE
    input_region = None
    output_region = None
    entry_label = None
    labels = {}
    rows = []          # (lineno, mnemonic, operands)
    directives_seen = set()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        # labels, possibly several, possibly followed by an instruction
        while True:
            head, sep, rest = line.partition(":")
            if sep and " " not in head and "\t" not in head and head \
                    and not head.startswith(".") and "," not in head:
                name = head.strip()
                if not name.isidentifier():
                    diags.append(Diagnostic(lineno, f"bad label {name!r}"))
                elif name in labels:
                    diags.append(Diagnostic(lineno,
                                            f"duplicate label {name!r}"))
                else:
                    labels[name] = len(rows)
                line = rest.strip()
                if not line:
                    break
            else:
                break
        if not line:
            continue
        if line.startswith("."):
            parts = line.split()
            d = parts[0]
            if d in directives_seen and d != ".entry":
                diags.append(Diagnostic(lineno, f"duplicate directive {d}"))
            directives_seen.add(d)
            if d == ".mem" and len(parts) == 2:
                memsize = _imm(parts[1], lineno, diags)
                if memsize <= 0:
                    diags.append(Diagnostic(lineno, "memory size must be > 0"))
                    memsize = DEFAULT_MEMSIZE
            elif d == ".input" and len(parts) == 3:
                input_region = (_imm(parts[1], lineno, diags),
                                _imm(parts[2], lineno, diags))
            elif d == ".output" and len(parts) == 3:
                output_region = (_imm(parts[1], lineno, diags),
                                 _imm(parts[2], lineno, diags))
            elif d == ".entry" and len(parts) == 2:
                entry_label = (parts[1], lineno)
            else:
                diags.append(Diagnostic(lineno, f"bad directive {line!r}"))
            continue
        mnem, _, opstr = line.partition(" ")
        mnem = mnem.strip().lower()
        operands = [o.strip() for o in opstr.split(",")] if opstr.strip() \
            else []
        rows.append((lineno, mnem, operands))

    # second pass: encode now that label addresses are known
    code = np.zeros((len(rows), 4), np.int64)
    for ip, (lineno, mnem, ops) in enumerate(rows):
        def need(k):
            if len(ops) != k:
                diags.append(Diagnostic(
                    lineno, f"{mnem} takes {k} operand(s), got {len(ops)}"))
                return False
            return True

        def target(tok):
            t = tok.strip()
            if t in labels:
                return labels[t]
            diags.append(Diagnostic(lineno, f"unknown label {t!r}"))
            return 0

        if mnem == "li":
            if need(2):
                code[ip] = (I.OP_LI, _reg(ops[0], lineno, diags), 0,
                            _imm(ops[1], lineno, diags))
        elif mnem == "mov":
            if need(2):
                code[ip] = (I.OP_MOV, _reg(ops[0], lineno, diags),
                            _reg(ops[1], lineno, diags), 0)
        elif mnem in ("ld", "ldb"):
            if need(2):
                r, off = _memop(ops[1], lineno, diags)
                op = I.OP_LD if mnem == "ld" else I.OP_LDB
                code[ip] = (op, _reg(ops[0], lineno, diags), r, off)
        elif mnem in ("st", "stb"):
            if need(2):
                r, off = _memop(ops[0], lineno, diags)
                op = I.OP_ST if mnem == "st" else I.OP_STB
                code[ip] = (op, _reg(ops[1], lineno, diags), r, off)
        elif mnem in _ALU3:
            if need(3):
                code[ip] = (_ALU3[mnem], _reg(ops[0], lineno, diags),
                            _reg(ops[1], lineno, diags),
                            _reg(ops[2], lineno, diags))
        elif mnem == "addi":
            if need(3):
                code[ip] = (I.OP_ADDI, _reg(ops[0], lineno, diags),
                            _reg(ops[1], lineno, diags),
                            _imm(ops[2], lineno, diags))
        elif mnem == "cmp":
            if need(2):
                code[ip] = (I.OP_CMP, _reg(ops[0], lineno, diags),
                            _reg(ops[1], lineno, diags), 0)
        elif mnem == "jmp":
            if need(1):
                code[ip] = (I.OP_JMP, 0, 0, target(ops[0]))
        elif mnem in _JCC:
            if need(1):
                code[ip] = (_JCC[mnem], 0, 0, target(ops[0]))
        elif mnem == "hash":
            if need(2):
                code[ip] = (I.OP_HASH, _reg(ops[0], lineno, diags),
                            _reg(ops[1], lineno, diags), 0)
        elif mnem == "halt":
            if need(0):
                code[ip] = (I.OP_HALT, 0, 0, 0)
        else:
            diags.append(Diagnostic(lineno, f"unknown mnemonic {mnem!r}"))

    if not rows:
        diags.append(Diagnostic(0, "program has no instructions"))

    entry = 0
    if entry_label is not None:
        name, lineno = entry_label
        if name in labels:
            entry = labels[name]
        else:
            diags.append(Diagnostic(lineno, f"unknown entry label {name!r}"))

    if input_region is None:
        input_region = (0, 0)
    if output_region is None:
        output_region = (0, 0)
    for what, (start, length) in (("input", input_region),
                                  ("output", output_region)):
        if start < 0 or length < 0 or start + length > memsize:
            diags.append(Diagnostic(
                0, f"{what} region [{start}, {start + length}) outside "
                   f"memory of {memsize} bytes"))

    if diags:
        raise AsmError(diags)

    return Program(code=code, entry=entry, memsize=memsize,
                   input_region=input_region, output_region=output_region,
                   labels=dict(labels), lines=text.splitlines())


# -- analyses ---------------------------------------------------------------

# pseudo-register index for the flag word in the liveness lattice
_FLAGS = 8


def _use_def(row):
    """(use set, def set) over r0..r7 plus the flags pseudo-register."""
    op, a, b, c = int(row[0]), int(row[1]), int(row[2]), int(row[3])
    if op == I.OP_LI:
        return set(), {a}
    if op in (I.OP_MOV, I.OP_HASH):
        return {b}, {a}
    if op in (I.OP_LD, I.OP_LDB):
        return {b}, {a}
    if op in (I.OP_ST, I.OP_STB):
        return {a, b}, set()
    if op in (I.OP_ADD, I.OP_SUB, I.OP_MUL, I.OP_AND, I.OP_OR, I.OP_XOR,
              I.OP_SHL, I.OP_SHR):
        return {b, c}, {a}
    if op in (I.OP_DIV, I.OP_MOD):
        # may clear flags on a zero divisor
        return {b, c}, {a, _FLAGS}
    if op == I.OP_ADDI:
        return {b}, {a}
    if op == I.OP_CMP:
        return {a, b}, {_FLAGS}
    if op == I.OP_JMP or op == I.OP_HALT:
        return set(), set()
    # conditional branches read the flags
    return {_FLAGS}, set()


def _successors(code, ip):
    op = int(code[ip, 0])
    if op == I.OP_HALT:
        return ()
    if op == I.OP_JMP:
        return (int(code[ip, 3]),)
    if I.OP_JLT <= op <= I.OP_JGT:
        return (ip + 1, int(code[ip, 3]))
    return (ip + 1,)


def liveness(program):
    """Per-ip live sets (registers live on entry to each instruction).

    Backward dataflow fixpoint over the 8 registers plus the flag word;
    only architectural registers 0..7 appear in the result.
    """
    if program._live is not None:
        return program._live
    code = program.code
    n = code.shape[0]
    use = []
    defs = []
    for ip in range(n):
        u, d = _use_def(code[ip])
        use.append(u)
        defs.append(d)
    live_in = [set() for _ in range(n)]
    changed = True
    while changed:
        changed = False
        for ip in range(n - 1, -1, -1):
            out = set()
            for s in _successors(code, ip):
                if 0 <= s < n:
                    out |= live_in[s]
            new = use[ip] | (out - defs[ip])
            if new != live_in[ip]:
                live_in[ip] = new
                changed = True
    result = [frozenset(s - {_FLAGS}) for s in live_in]
    program._live = result
    return result


def live_regs(program, ip):
    """LiveSet at ip: frozenset of architectural register indices."""
    if not 0 <= ip < program.n_instructions:
        raise IndexError(f"ip {ip} out of range")
    return liveness(program)[ip]


def candidates(program):
    """Potential recurring points: targets of backward jumps, sorted by ip."""
    code = program.code
    found = set()
    for ip in range(code.shape[0]):
        op = int(code[ip, 0])
        if op == I.OP_JMP or I.OP_JLT <= op <= I.OP_JGT:
            tgt = int(code[ip, 3])
            if tgt <= ip:
                found.add(tgt)
    return sorted(found)
