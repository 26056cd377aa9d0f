"""Linearized machine states and byte-granular masks.

A machine state is one flat byte buffer:

    bytes  0..63    registers r0..r7, each 8 bytes little endian
    bytes 64..71    the comparison flag word (int64, little endian)
    bytes 72..      memory

Masks, equality and fast-forward all work on this single address space, so
"register r3 changed" and "memory byte 17 changed" are the same kind of fact.
The instruction pointer and the executed-instruction count ride along on the
StateVector but are excluded from masks and from equality: they are control
metadata, not data the programs compute on.

Mask granularity is one byte. Reported "bit" counts are byte counts times 8.
"""

import struct

import numpy as np

REG_COUNT = 8
REG_BYTES = REG_COUNT * 8       # bytes 0..63
FLAG_BASE = REG_BYTES           # bytes 64..71
HEADER_BYTES = FLAG_BASE + 8    # memory starts at 72

_STATE_MAGIC = b"ASCV"
_MASK_MAGIC = b"ASCM"
_FORMAT_VERSION = 1

# splitmix64 multipliers, also used by the machine's hash instruction
_MIX_C1 = 0xBF58476D1CE4E5B9
_MIX_C2 = 0x94D049BB133111EB
_U64 = (1 << 64) - 1

# fingerprint of the empty live set: arbitrary but fixed forever
_EMPTY_LIVE_KEY = 0x9AE16A3B2F90404F


def mix64(x):
    """splitmix64 finalizer over python ints, result in [0, 2**64)."""
    x &= _U64
    x ^= x >> 30
    x = (x * _MIX_C1) & _U64
    x ^= x >> 27
    x = (x * _MIX_C2) & _U64
    x ^= x >> 31
    return x


def reg_span(i):
    """Byte span [lo, hi) of register i in the linear layout."""
    if not 0 <= i < REG_COUNT:
        raise IndexError(f"register index {i} out of range")
    return i * 8, i * 8 + 8


def flag_span():
    return FLAG_BASE, FLAG_BASE + 8


def mem_byte(addr):
    """Linear index of memory byte addr."""
    return HEADER_BYTES + addr


class StateVector:
    """One machine state: registers, flags and memory in a single buffer."""

    __slots__ = ("buf", "ip", "icount")

    def __init__(self, buf, ip=0, icount=0):
        buf = np.asarray(buf, dtype=np.uint8)
        if buf.ndim != 1 or buf.shape[0] < HEADER_BYTES:
            raise ValueError("state buffer must be 1-d with at least "
                             f"{HEADER_BYTES} bytes")
        self.buf = buf
        self.ip = int(ip)
        self.icount = int(icount)

    @classmethod
    def zeros(cls, memsize):
        return cls(np.zeros(HEADER_BYTES + memsize, np.uint8))

    @property
    def size(self):
        return self.buf.shape[0]

    @property
    def memsize(self):
        return self.buf.shape[0] - HEADER_BYTES

    @property
    def memory(self):
        return self.buf[HEADER_BYTES:]

    def clone(self):
        return StateVector(self.buf.copy(), self.ip, self.icount)

    def reg(self, i):
        lo, hi = reg_span(i)
        return int(self.buf[lo:hi].view(np.int64)[0])

    def set_reg(self, i, value):
        lo, hi = reg_span(i)
        self.buf[lo:hi].view(np.uint64)[0] = np.uint64(value & _U64)

    @property
    def flags(self):
        return int(self.buf[FLAG_BASE:FLAG_BASE + 8].view(np.int64)[0])

    @flags.setter
    def flags(self, value):
        self.buf[FLAG_BASE:FLAG_BASE + 8].view(np.uint64)[0] = \
            np.uint64(value & _U64)

    def __eq__(self, other):
        # architectural bytes only; ip/icount deliberately excluded
        if not isinstance(other, StateVector):
            return NotImplemented
        return (self.buf.shape == other.buf.shape
                and bool(np.array_equal(self.buf, other.buf)))

    def __hash__(self):
        raise TypeError("StateVector is mutable and unhashable")

    def __repr__(self):
        return (f"StateVector(memsize={self.memsize}, ip={self.ip}, "
                f"icount={self.icount})")


class BitMask:
    """Byte-granular mask over a state buffer of the same size.

    Stored as a uint8 0/1 array. Set bytes select which state bytes an
    operation cares about; everything else is ignored.
    """

    __slots__ = ("bits",)

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.ndim != 1:
            raise ValueError("mask must be 1-d")
        self.bits = bits

    @classmethod
    def zeros(cls, universe):
        return cls(np.zeros(universe, np.uint8))

    @classmethod
    def full(cls, universe):
        return cls(np.ones(universe, np.uint8))

    @classmethod
    def from_bytes_set(cls, universe, byte_indices):
        m = np.zeros(universe, np.uint8)
        idx = np.asarray(list(byte_indices), dtype=np.int64)
        if idx.size:
            m[idx] = 1
        return cls(m)

    @classmethod
    def for_regs(cls, universe, regs):
        m = np.zeros(universe, np.uint8)
        for r in regs:
            lo, hi = reg_span(r)
            m[lo:hi] = 1
        return cls(m)

    @classmethod
    def for_memory(cls, universe, start, length):
        m = np.zeros(universe, np.uint8)
        m[HEADER_BYTES + start:HEADER_BYTES + start + length] = 1
        return cls(m)

    @property
    def universe(self):
        return self.bits.shape[0]

    def clone(self):
        return BitMask(self.bits.copy())

    def set_range(self, lo, hi):
        self.bits[lo:hi] = 1

    def byte_count(self):
        return int(self.bits.sum())

    def bit_count(self):
        return self.byte_count() * 8

    def is_empty(self):
        return not bool(self.bits.any())

    def byte_indices(self):
        return np.nonzero(self.bits)[0]

    def __or__(self, other):
        self._check(other)
        return BitMask(np.bitwise_or(self.bits, other.bits))

    def __and__(self, other):
        self._check(other)
        return BitMask(np.bitwise_and(self.bits, other.bits))

    def __invert__(self):
        return BitMask(np.bitwise_xor(self.bits, 1))

    def __eq__(self, other):
        if not isinstance(other, BitMask):
            return NotImplemented
        return (self.bits.shape == other.bits.shape
                and bool(np.array_equal(self.bits, other.bits)))

    def __hash__(self):
        raise TypeError("BitMask is mutable and unhashable")

    def covers(self, other):
        """True if every byte set in other is set in self."""
        self._check(other)
        return not bool(np.any((other.bits == 1) & (self.bits == 0)))

    def _check(self, other):
        if self.bits.shape != other.bits.shape:
            raise ValueError("mask universes differ: "
                             f"{self.bits.shape[0]} vs {other.bits.shape[0]}")

    def __repr__(self):
        return f"BitMask({self.byte_count()}/{self.universe} bytes set)"


def masked_eq(a, b, mask):
    """True if a and b agree on every byte selected by mask.

    ip and icount are not compared.
    """
    if a.buf.shape != b.buf.shape or a.buf.shape != mask.bits.shape:
        raise ValueError("state/mask sizes differ")
    diff = a.buf != b.buf
    return not bool(np.any(diff & (mask.bits != 0)))


def fast_forward(z_m, z_s, m_w):
    """Splice a cached successor into the current state.

    Bytes selected by the write mask m_w come from the cached end state z_s,
    every other byte keeps its current value from z_m. The instruction
    pointer comes from z_s (execution resumes where the cached run stopped);
    the instruction count stays z_m's, the caller accounts for skipped work.
    """
    if z_m.buf.shape != z_s.buf.shape or z_m.buf.shape != m_w.bits.shape:
        raise ValueError("state/mask sizes differ")
    buf = np.where(m_w.bits != 0, z_s.buf, z_m.buf)
    return StateVector(buf, ip=z_s.ip, icount=z_m.icount)


def fingerprint(z, live):
    """64-bit key over the values of the live registers.

    Only live register values (and the live set itself) feed the key: dead
    registers, flags and memory must not perturb it, so states that differ
    only in dead bytes share a cache bucket. An empty live set maps to a
    fixed constant.
    """
    regs = sorted(live)
    if not regs:
        return _EMPTY_LIVE_KEY
    sig = 0
    for r in regs:
        sig |= 1 << r
    acc = mix64(sig)
    for r in regs:
        lo, hi = reg_span(r)
        v = int(z.buf[lo:hi].view(np.uint64)[0])
        acc = mix64(acc ^ mix64(v ^ (0x632BE59BD9B4E019 * (r + 1) & _U64)))
    return acc


def state_to_bytes(z):
    head = _STATE_MAGIC + struct.pack("<BxxxQqq", _FORMAT_VERSION,
                                      z.memsize, z.ip, z.icount)
    return head + z.buf.tobytes()


def state_from_bytes(data):
    if data[:4] != _STATE_MAGIC:
        raise ValueError("not a state vector blob")
    version, memsize, ip, icount = struct.unpack_from("<BxxxQqq", data, 4)
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported state format version {version}")
    off = 4 + struct.calcsize("<BxxxQqq")
    size = HEADER_BYTES + memsize
    buf = np.frombuffer(data[off:off + size], dtype=np.uint8).copy()
    if buf.shape[0] != size:
        raise ValueError("truncated state vector blob")
    return StateVector(buf, ip=ip, icount=icount)


def mask_to_bytes(m):
    packed = np.packbits(m.bits, bitorder="little")
    head = _MASK_MAGIC + struct.pack("<BxxxQ", _FORMAT_VERSION, m.universe)
    return head + packed.tobytes()


def mask_from_bytes(data):
    if data[:4] != _MASK_MAGIC:
        raise ValueError("not a mask blob")
    version, universe = struct.unpack_from("<BxxxQ", data, 4)
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported mask format version {version}")
    off = 4 + struct.calcsize("<BxxxQ")
    nbytes = (universe + 7) // 8
    packed = np.frombuffer(data[off:off + nbytes], dtype=np.uint8)
    if packed.shape[0] != nbytes:
        raise ValueError("truncated mask blob")
    bits = np.unpackbits(packed, count=universe, bitorder="little")
    return BitMask(bits.astype(np.uint8))
