"""Interpreter core.

One source of truth for instruction semantics, compiled with numba on the
default backend and executed as plain numpy scalar code on the fallback.
Everything here is written so both paths wrap identically in int64:

  * divisor 0 and -1 are guarded explicitly (LLVM treats INT64_MIN // -1
    as poison where numpy wraps),
  * shift counts are masked to 0..63 (shifts >= 64 are undefined in LLVM),
  * all other arithmetic relies on plain int64 two's-complement wrapping,
    which numba and numpy scalars already agree on.

Mask discipline: a byte is marked read only if it has not been written
earlier in the same interval (read-before-write), and marked written on any
write. Instruction fetch and immediates touch no masks. A faulting
instruction has no effect at all: no state change, no mask marks, no icount.
"""

import numpy as np

from .backend import accelerate

# opcodes (shared with the assembler)
OP_LI = 0
OP_MOV = 1
OP_LD = 2
OP_LDB = 3
OP_ST = 4
OP_STB = 5
OP_ADD = 6
OP_SUB = 7
OP_MUL = 8
OP_DIV = 9
OP_MOD = 10
OP_AND = 11
OP_OR = 12
OP_XOR = 13
OP_SHL = 14
OP_SHR = 15
OP_ADDI = 16
OP_CMP = 17
OP_JMP = 18
OP_JLT = 19
OP_JLE = 20
OP_JEQ = 21
OP_JNE = 22
OP_JGE = 23
OP_JGT = 24
OP_HASH = 25
OP_HALT = 26

# status codes returned by the core
ST_HIT = 0
ST_HALT = 1
ST_BUDGET = 2
ST_FAULT = 3

FLAG_BASE = 64
MEM_BASE = 72

# splitmix64 finalizer constants reinterpreted as int64
_HC1 = np.int64(0xBF58476D1CE4E5B9 - (1 << 64))
_HC2 = np.int64(0x94D049BB133111EB - (1 << 64))
_M34 = np.int64((1 << 34) - 1)
_M37 = np.int64((1 << 37) - 1)
_M33 = np.int64((1 << 33) - 1)


def _read_reg(rmask, wmask, r):
    base = r * 8
    for k in range(8):
        if wmask[base + k] == 0:
            rmask[base + k] = 1


def _write_reg(wmask, r):
    base = r * 8
    for k in range(8):
        wmask[base + k] = 1


def _read_flags(rmask, wmask):
    for k in range(FLAG_BASE, FLAG_BASE + 8):
        if wmask[k] == 0:
            rmask[k] = 1


def _write_flags(wmask):
    for k in range(FLAG_BASE, FLAG_BASE + 8):
        wmask[k] = 1


_read_reg = accelerate(_read_reg)
_write_reg = accelerate(_write_reg)
_read_flags = accelerate(_read_flags)
_write_flags = accelerate(_write_flags)


def _run_until_core(code, regs, flags, mem, rmask, wmask, misc, rip, period,
                    budget, counts):
    """Run until the period-th arrival at rip, halt, fault or budget.

    misc is [ip, icount, fault_ip, fault_addr]. An arrival is counted when
    the instruction pointer lands on rip after executing an instruction, so
    starting exactly at rip does not count and the instruction at rip is not
    executed on a hit. rip=-1 never matches. Returns a status code.
    """
    ip = misc[0]
    icount = misc[1]
    ncode = code.shape[0]
    memsize = mem.shape[0]
    counting = counts.shape[0] != 0
    arrivals = 0
    executed = 0
    status = ST_BUDGET
    while True:
        if executed >= budget:
            status = ST_BUDGET
            break
        if ip < 0 or ip >= ncode:
            misc[2] = ip
            misc[3] = -1
            status = ST_FAULT
            break
        op = code[ip, 0]
        a = code[ip, 1]
        b = code[ip, 2]
        c = code[ip, 3]
        nxt = ip + 1

        if op == OP_HALT:
            icount += 1
            if counting:
                counts[ip] += 1
            status = ST_HALT
            break

        elif op == OP_LI:
            _write_reg(wmask, a)
            regs[a] = c

        elif op == OP_MOV:
            _read_reg(rmask, wmask, b)
            _write_reg(wmask, a)
            regs[a] = regs[b]

        elif op == OP_LD or op == OP_LDB:
            addr = regs[b] + c
            span = 8 if op == OP_LD else 1
            if addr < 0 or addr + span > memsize:
                misc[2] = ip
                misc[3] = addr
                status = ST_FAULT
                break
            _read_reg(rmask, wmask, b)
            for k in range(span):
                mb = MEM_BASE + addr + k
                if wmask[mb] == 0:
                    rmask[mb] = 1
            if op == OP_LD:
                v = np.int64(0)
                for k in range(7, -1, -1):
                    v = (v << 8) | np.int64(mem[addr + k])
            else:
                v = np.int64(mem[addr])
            _write_reg(wmask, a)
            regs[a] = v

        elif op == OP_ST or op == OP_STB:
            addr = regs[b] + c
            span = 8 if op == OP_ST else 1
            if addr < 0 or addr + span > memsize:
                misc[2] = ip
                misc[3] = addr
                status = ST_FAULT
                break
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, a)
            v = regs[a]
            for k in range(span):
                mem[addr + k] = np.uint8((v >> (8 * k)) & 0xFF)
                wmask[MEM_BASE + addr + k] = 1

        elif op == OP_ADD:
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, c)
            _write_reg(wmask, a)
            regs[a] = regs[b] + regs[c]

        elif op == OP_SUB:
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, c)
            _write_reg(wmask, a)
            regs[a] = regs[b] - regs[c]

        elif op == OP_MUL:
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, c)
            _write_reg(wmask, a)
            regs[a] = regs[b] * regs[c]

        elif op == OP_DIV:
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, c)
            _write_reg(wmask, a)
            y = regs[c]
            if y == 0:
                # division by zero zeroes both the result and the flags
                regs[a] = 0
                _write_flags(wmask)
                flags[0] = 0
            elif y == -1:
                regs[a] = -regs[b]
            else:
                regs[a] = regs[b] // y

        elif op == OP_MOD:
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, c)
            _write_reg(wmask, a)
            y = regs[c]
            if y == 0:
                regs[a] = 0
                _write_flags(wmask)
                flags[0] = 0
            elif y == -1:
                regs[a] = 0
            else:
                regs[a] = regs[b] % y

        elif op == OP_AND:
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, c)
            _write_reg(wmask, a)
            regs[a] = regs[b] & regs[c]

        elif op == OP_OR:
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, c)
            _write_reg(wmask, a)
            regs[a] = regs[b] | regs[c]

        elif op == OP_XOR:
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, c)
            _write_reg(wmask, a)
            regs[a] = regs[b] ^ regs[c]

        elif op == OP_SHL:
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, c)
            _write_reg(wmask, a)
            s = regs[c] & 63
            regs[a] = regs[b] << s

        elif op == OP_SHR:
            # arithmetic shift; logical shifts are built from it with masks
            _read_reg(rmask, wmask, b)
            _read_reg(rmask, wmask, c)
            _write_reg(wmask, a)
            s = regs[c] & 63
            regs[a] = regs[b] >> s

        elif op == OP_ADDI:
            _read_reg(rmask, wmask, b)
            _write_reg(wmask, a)
            regs[a] = regs[b] + c

        elif op == OP_CMP:
            _read_reg(rmask, wmask, a)
            _read_reg(rmask, wmask, b)
            _write_flags(wmask)
            x = regs[a]
            y = regs[b]
            if x < y:
                flags[0] = -1
            elif x == y:
                flags[0] = 0
            else:
                flags[0] = 1

        elif op == OP_JMP:
            nxt = c

        elif op == OP_HASH:
            _read_reg(rmask, wmask, b)
            _write_reg(wmask, a)
            x = regs[b]
            x = x ^ ((x >> 30) & _M34)
            x = x * _HC1
            x = x ^ ((x >> 27) & _M37)
            x = x * _HC2
            x = x ^ ((x >> 31) & _M33)
            regs[a] = x

        else:
            # conditional branches
            _read_flags(rmask, wmask)
            f = flags[0]
            take = False
            if op == OP_JLT:
                take = f < 0
            elif op == OP_JLE:
                take = f <= 0
            elif op == OP_JEQ:
                take = f == 0
            elif op == OP_JNE:
                take = f != 0
            elif op == OP_JGE:
                take = f >= 0
            elif op == OP_JGT:
                take = f > 0
            if take:
                nxt = c

        icount += 1
        executed += 1
        if counting:
            counts[ip] += 1
        ip = nxt
        if ip == rip:
            arrivals += 1
            if arrivals >= period:
                status = ST_HIT
                break

    misc[0] = ip
    misc[1] = icount
    return status


run_until_core = accelerate(_run_until_core)
