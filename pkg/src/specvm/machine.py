"""The register machine.

Eight 64-bit integer registers, one comparison flag word, a flat byte
memory, and two byte-granular access masks that record what an interval of
execution read (before writing) and wrote. All arithmetic is int64 with
two's-complement wrapping; division and remainder by zero write a zero
result and clear the flags instead of trapping, shift counts are taken
modulo 64, and right shift is arithmetic.

Out-of-bounds memory accesses raise ExecutionFault carrying the faulting ip
and address; the faulting instruction has no architectural effect.
"""

import enum

import numpy as np

from . import _interp
from .statevec import BitMask, HEADER_BYTES, StateVector

UNBOUNDED = 1 << 62


class StopReason(enum.Enum):
    HIT_RIP = "hit_rip"
    HALTED = "halted"
    BUDGET_EXHAUSTED = "budget_exhausted"


class ExecutionFault(RuntimeError):
    """Recoverable fault: out-of-bounds access or bad instruction pointer."""

    def __init__(self, ip, addr):
        self.ip = int(ip)
        self.addr = int(addr)
        super().__init__(f"fault at ip={self.ip}, address={self.addr}")


class Vm:
    """One machine instance executing a parsed program."""

    def __init__(self, program):
        self.program = program
        memsize = program.memsize
        self._regs = np.zeros(8, np.int64)
        self._flags = np.zeros(1, np.int64)
        self._mem = np.zeros(memsize, np.uint8)
        universe = HEADER_BYTES + memsize
        self._rmask = np.zeros(universe, np.uint8)
        self._wmask = np.zeros(universe, np.uint8)
        # [ip, icount, fault_ip, fault_addr]
        self._misc = np.zeros(4, np.int64)
        self._nocounts = np.zeros(0, np.int64)
        self.halted = False
        self.reset()

    # -- setup ------------------------------------------------------------

    def reset(self, input_bytes=None, memory_image=None):
        """Zero the machine and optionally place input bytes.

        input_bytes is written at the program's declared input region;
        memory_image replaces all of memory instead.
        """
        self._regs[:] = 0
        self._flags[0] = 0
        self._mem[:] = 0
        self.clear_masks()
        self._misc[:] = 0
        self._misc[0] = self.program.entry
        self.halted = False
        if memory_image is not None:
            img = np.asarray(memory_image, dtype=np.uint8)
            if img.shape[0] != self._mem.shape[0]:
                raise ValueError("memory image size mismatch")
            self._mem[:] = img
        if input_bytes is not None:
            start, length = self.program.input_region
            data = np.frombuffer(bytes(input_bytes), dtype=np.uint8)
            if data.shape[0] > length:
                raise ValueError(
                    f"input is {data.shape[0]} bytes, region holds {length}")
            self._mem[start:start + data.shape[0]] = data

    # -- introspection ----------------------------------------------------

    @property
    def ip(self):
        return int(self._misc[0])

    @property
    def icount(self):
        return int(self._misc[1])

    @property
    def memsize(self):
        return self._mem.shape[0]

    @property
    def universe(self):
        return HEADER_BYTES + self._mem.shape[0]

    def reg(self, i):
        return int(self._regs[i])

    def set_reg(self, i, value):
        self._regs[i] = np.int64(value)

    @property
    def flags(self):
        return int(self._flags[0])

    @property
    def memory(self):
        return self._mem

    # -- execution --------------------------------------------------------

    def run_until(self, rip, period=1, budget=None, counts=None):
        """Execute until the period-th arrival at rip, halt or budget.

        An arrival only counts after at least one executed instruction, and
        the instruction at rip is not executed on a hit. Faults raise
        ExecutionFault. Returns a StopReason.
        """
        if self.halted:
            return StopReason.HALTED
        if period < 1:
            raise ValueError("period must be >= 1")
        b = UNBOUNDED if budget is None else int(budget)
        carr = self._nocounts if counts is None else counts
        with np.errstate(all="ignore"):
            status = _interp.run_until_core(
                self.program.code, self._regs, self._flags, self._mem,
                self._rmask, self._wmask, self._misc, rip, period, b, carr)
        if status == _interp.ST_FAULT:
            raise ExecutionFault(self._misc[2], self._misc[3])
        if status == _interp.ST_HALT:
            self.halted = True
            return StopReason.HALTED
        if status == _interp.ST_HIT:
            return StopReason.HIT_RIP
        return StopReason.BUDGET_EXHAUSTED

    def run_to_halt(self, budget=None, counts=None):
        return self.run_until(-1, 1, budget=budget, counts=counts)

    def step(self):
        """Execute exactly one instruction."""
        return self.run_until(-1, 1, budget=1)

    # -- state transfer ---------------------------------------------------

    def gather(self):
        """Deep copy of the architectural state as a StateVector."""
        buf = np.empty(self.universe, np.uint8)
        buf[0:64] = self._regs.view(np.uint8)
        buf[64:HEADER_BYTES] = self._flags.view(np.uint8)
        buf[HEADER_BYTES:] = self._mem
        return StateVector(buf, ip=self.ip, icount=self.icount)

    def scatter(self, z, clear_masks=True):
        """Replace registers, flags, memory and ip from a StateVector."""
        if z.size != self.universe:
            raise ValueError(
                f"state size {z.size} does not match machine {self.universe}")
        self._regs[:] = z.buf[0:64].view(np.int64)
        self._flags[0] = z.buf[64:HEADER_BYTES].view(np.int64)[0]
        self._mem[:] = z.buf[HEADER_BYTES:]
        self._misc[0] = z.ip
        self._misc[1] = z.icount
        # execution parks the ip on the halt instruction, so a state
        # gathered there is a halted machine; restoring it must not
        # re-execute the halt
        self.halted = bool(0 <= z.ip < self.program.n_instructions and
                           self.program.code[z.ip, 0] == _interp.OP_HALT)
        if clear_masks:
            self.clear_masks()

    @property
    def read_mask(self):
        return BitMask(self._rmask.copy())

    @property
    def write_mask(self):
        return BitMask(self._wmask.copy())

    def clear_masks(self):
        self._rmask[:] = 0
        self._wmask[:] = 0


def load_memory_image(source, size):
    """Build a memory image: from a file path, bytes, or an integer seed."""
    if isinstance(source, (bytes, bytearray)):
        data = np.frombuffer(bytes(source), np.uint8)
    elif isinstance(source, int):
        rng = np.random.default_rng(source)
        return rng.integers(0, 256, size=size, dtype=np.uint8)
    else:
        with open(source, "rb") as fh:
            data = np.frombuffer(fh.read(), np.uint8)
    if data.shape[0] > size:
        raise ValueError(f"image is {data.shape[0]} bytes, memory is {size}")
    img = np.zeros(size, np.uint8)
    img[:data.shape[0]] = data
    return img
