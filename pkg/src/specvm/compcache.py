"""The computation cache.

Entries record one observed (or speculated) interval of execution between
recurring breakpoints: the state it started from, the state it reached, and
byte-granular masks of what it actually read before writing and what it
wrote. A lookup proves an entry applies to the current state by comparing
only the bytes the entry read; applying it splices in only the bytes it
wrote. Keys are fingerprints of the live register values, so a bucket scan
plus one masked comparison per entry replaces full-state matching.

Stitching merges an entry with another whose precondition is satisfied by
the first entry's end state, producing a single entry that fast-forwards
across both intervals. Buckets stay ordered by descending span so a longer
verified chain wins over its own prefix under the first-match lookup rule;
the constituent entries are retained.
"""

import io
import json
import threading
from dataclasses import dataclass, field

from .statevec import (BitMask, StateVector, fast_forward, fingerprint,
                       mask_from_bytes, mask_to_bytes, masked_eq,
                       state_from_bytes, state_to_bytes)


@dataclass
class CacheEntry:
    z_p: StateVector        # precondition state (breakpoint-aligned)
    z_s: StateVector        # successor state after the interval(s)
    m_r: BitMask            # bytes read before being written
    m_w: BitMask            # bytes written
    key: int                # fingerprint of z_p under the live set
    icount_delta: int       # instructions the interval(s) executed
    timestep_span: int = 1  # breakpoints crossed
    hits: int = 0           # times this entry fast-forwarded somebody
    serial: int = field(default=-1, compare=False)
    succ_key: int = field(default=-1, compare=False)  # fingerprint of z_s


@dataclass
class CacheStats:
    adds: int = 0
    duplicates: int = 0
    hits: int = 0
    misses: int = 0
    verifications_failed: int = 0
    stitches: int = 0
    evictions_refused: int = 0

    def as_dict(self):
        return dict(self.__dict__)


class Cache:
    """Fingerprint-keyed store of verified execution intervals.

    The cache needs the program's live set at the breakpoint to fingerprint
    successor states during stitching. Thread safety is a single coarse
    lock around every public operation.
    """

    def __init__(self, live, max_entries=None):
        self.live = frozenset(live)
        self.max_entries = max_entries
        self._buckets = {}
        self._order = []        # insertion order, for iteration and dump
        self._by_succ = {}      # succ_key -> entries ending at that state
        self._queue = []        # stitch frontier, newest on top
        self._stitched_pairs = set()
        self._next_serial = 0
        self._lock = threading.Lock()
        self.stats = CacheStats()

    def __len__(self):
        return len(self._order)

    def entries(self):
        with self._lock:
            return list(self._order)

    # -- insertion ----------------------------------------------------------

    def add(self, entry):
        with self._lock:
            return self._add_locked(entry)

    def _add_locked(self, entry):
        if self.max_entries is not None and len(self._order) >= \
                self.max_entries:
            self.stats.evictions_refused += 1
            return False
        bucket = self._buckets.setdefault(entry.key, [])
        for old in bucket:
            if self._same_entry(old, entry):
                self.stats.duplicates += 1
                return False
        entry.serial = self._next_serial
        self._next_serial += 1
        if entry.succ_key == -1:
            entry.succ_key = fingerprint(entry.z_s, self.live)
        # keep each bucket ordered by descending span so the first
        # verified match is also the longest applicable fast-forward;
        # plain speculations (span 1) simply append in arrival order
        at = len(bucket)
        while at > 0 and bucket[at - 1].timestep_span < entry.timestep_span:
            at -= 1
        bucket.insert(at, entry)
        self._order.append(entry)
        self._by_succ.setdefault(entry.succ_key, []).append(entry)
        self._queue.append(entry)
        self.stats.adds += 1
        return True

    @staticmethod
    def _same_entry(a, b):
        """Full semantic duplicate: same key, masks, spans and same states
        on every byte the masks can observe. Chain entries share key and
        precondition with their prefixes but differ in masks or span, so
        they survive this check."""
        return (a.key == b.key
                and a.icount_delta == b.icount_delta
                and a.timestep_span == b.timestep_span
                and a.m_r == b.m_r
                and a.m_w == b.m_w
                and masked_eq(a.z_p, b.z_p, a.m_r)
                and masked_eq(a.z_s, b.z_s, a.m_w))

    # -- lookup ---------------------------------------------------------------

    def lookup(self, z):
        """First entry at z's execution point whose read-set bytes match.

        The bucket is scanned in insertion order (merged chains sit at the
        front); each candidate is verified with a masked comparison before
        it may be used. Failed verifications are counted: they measure how
        often the fingerprint alone would have lied.
        """
        key = fingerprint(z, self.live)
        with self._lock:
            bucket = self._buckets.get(key)
            if bucket:
                for entry in bucket:
                    if z.ip == entry.z_p.ip and \
                            masked_eq(z, entry.z_p, entry.m_r):
                        entry.hits += 1
                        self.stats.hits += 1
                        return entry
                    self.stats.verifications_failed += 1
            self.stats.misses += 1
            return None

    # -- stitching ------------------------------------------------------------

    def stitch_pass(self, budget):
        """Merge entries whose intervals abut, examining at most budget pairs.

        For entries e1, e2: if e2's read set is satisfied by e1's end state,
        the pair collapses into one entry spanning both intervals:

            z_p = e1.z_p
            z_s = e2's writes spliced over e1.z_s
            m_r = e1.m_r | (e2.m_r minus bytes e1 wrote)
            m_w = e1.m_w | e2.m_w

        Work proceeds from a frontier of entries added since the last pass,
        newest first, so fresh runs of adjacent speculations collapse into
        one long span before the next lookup even when older chains still
        have unexplored pairs. Every new pair involves at least one queued
        entry (successors are found through the bucket index, predecessors
        through the end-state index), so the closure loses nothing by never
        revisiting drained entries. Returns the number of merges.
        """
        with self._lock:
            merges = 0
            examined = 0
            while self._queue and examined < budget:
                e = self._queue.pop()
                requeue = False
                succs = list(self._buckets.get(e.succ_key, ()))
                preds = list(self._by_succ.get(e.key, ()))
                pairs = [(e, s) for s in succs] + [(p, e) for p in preds]
                for first, second in pairs:
                    if examined >= budget:
                        requeue = True
                        break
                    if first is second:
                        continue
                    pair = (first.serial, second.serial)
                    if pair in self._stitched_pairs:
                        continue
                    examined += 1
                    self._stitched_pairs.add(pair)
                    if first.z_s.ip != second.z_p.ip or \
                            not masked_eq(first.z_s, second.z_p, second.m_r):
                        continue
                    merged = CacheEntry(
                        z_p=first.z_p,
                        z_s=fast_forward(first.z_s, second.z_s, second.m_w),
                        m_r=first.m_r | (second.m_r & ~first.m_w),
                        m_w=first.m_w | second.m_w,
                        key=first.key,
                        icount_delta=first.icount_delta + second.icount_delta,
                        timestep_span=first.timestep_span +
                        second.timestep_span,
                    )
                    if self._add_locked(merged):
                        self.stats.stitches += 1
                        merges += 1
                if requeue:
                    self._queue.append(e)
            return merges

    # -- persistence ------------------------------------------------------------

    def dump(self, path):
        """Write entries to `path` (binary) and an index to `path.jsonl`.

        The index records each entry's position within its bucket so a
        round trip preserves lookup order exactly.
        """
        index_path = str(path) + ".jsonl"
        with self._lock:
            entries = list(self._order)
            positions = {id(e): pos
                         for bucket in self._buckets.values()
                         for pos, e in enumerate(bucket)}
        with open(path, "wb") as blob, open(index_path, "w") as index:
            offset = 0
            for e in entries:
                parts = [state_to_bytes(e.z_p), state_to_bytes(e.z_s),
                         mask_to_bytes(e.m_r), mask_to_bytes(e.m_w)]
                rec = io.BytesIO()
                for p in parts:
                    rec.write(len(p).to_bytes(8, "little"))
                    rec.write(p)
                data = rec.getvalue()
                blob.write(data)
                index.write(json.dumps({
                    "offset": offset,
                    "length": len(data),
                    "key": f"{e.key:016x}",
                    "bucket_pos": positions[id(e)],
                    "icount_delta": e.icount_delta,
                    "timestep_span": e.timestep_span,
                    "read_bits": e.m_r.bit_count(),
                    "write_bits": e.m_w.bit_count(),
                    "hits": e.hits,
                }, sort_keys=True) + "\n")
                offset += len(data)

    @classmethod
    def load(cls, path, live, max_entries=None):
        cache = cls(live, max_entries=max_entries)
        index_path = str(path) + ".jsonl"
        records = []
        with open(path, "rb") as blob, open(index_path) as index:
            for line in index:
                meta = json.loads(line)
                blob.seek(meta["offset"])
                data = blob.read(meta["length"])
                view = memoryview(data)
                parts = []
                pos = 0
                for _ in range(4):
                    n = int.from_bytes(view[pos:pos + 8], "little")
                    pos += 8
                    parts.append(bytes(view[pos:pos + n]))
                    pos += n
                entry = CacheEntry(
                    z_p=state_from_bytes(parts[0]),
                    z_s=state_from_bytes(parts[1]),
                    m_r=mask_from_bytes(parts[2]),
                    m_w=mask_from_bytes(parts[3]),
                    key=int(meta["key"], 16),
                    icount_delta=meta["icount_delta"],
                    timestep_span=meta["timestep_span"],
                )
                records.append((meta["bucket_pos"], len(records), entry))
        # adding in bucket-position order reproduces each bucket's scan
        # order (spans arrive descending, so the order rule keeps them put)
        for _, _, entry in sorted(records, key=lambda r: (r[0], r[1])):
            cache.add(entry)
        return cache
