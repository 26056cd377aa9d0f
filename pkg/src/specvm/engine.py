"""The speculative execution engine.

One main machine executes the program natively from breakpoint to
breakpoint (every `period`-th arrival at the recurring ip). A pool of
simulated workers speculates ahead: each is handed a predicted state for a
future breakpoint, executes one interval from it, and the resulting
transition (precondition, successor, read set, write set) is inserted into
the computation cache. Whenever the main machine reaches a breakpoint whose
read-set bytes match a cached entry, it fast-forwards: the entry's written
bytes are spliced in and the skipped interval costs nothing.

Workers are simulated under a virtual clock rather than OS threads: a
speculation that executed W instructions on a worker with efficiency e
completes after the main machine has executed W/e instructions natively.
Completions are processed at breakpoint arrival before lookup, so a worker
whose result becomes ready exactly at the tied breakpoint still counts.
`eager` mode makes completion instantaneous, which gives the best case the
cost model allows.

A run is only accepted if the output region ends bit-identical to a native
reference run and the skipped plus executed instruction counts reconcile
exactly; anything else raises ValidationFailed.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .asmlang import live_regs
from .backend import backend_name
from .compcache import Cache, CacheEntry
from .machine import ExecutionFault, StopReason, Vm
from .statevec import fast_forward, fingerprint

_FREE, _SPECULATING, _DONE = 0, 1, 2


class ValidationFailed(RuntimeError):
    """Speculative output differed from the native reference run."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class EngineConfig:
    rip: int
    period: int = 1
    workers: int = 0
    efficiency: float = 1.0
    lookahead: int = None           # N; default ceil(1/efficiency) + 1
    iterated_lookup: bool = False   # loop lookups instead of stitching
    stitch_budget: int = 256        # pairs examined per breakpoint
    timestep_table_size: int = 65536
    max_cache_entries: int = None
    mode: str = "virtual_time"      # or "eager"
    budget_factor: int = 8          # speculation cap, in expected intervals
    trace: bool = False

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("efficiency must be in (0, 1]")
        if self.workers < 0:
            raise ValueError("workers must be >= 0")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.mode not in ("virtual_time", "eager"):
            raise ValueError(f"unknown mode {self.mode!r}")
        ts = self.timestep_table_size
        if ts < 2 or ts & (ts - 1):
            raise ValueError("timestep_table_size must be a power of two")
        if self.lookahead is None:
            # a worker needs 1/e native intervals of virtual time; the +1
            # guarantees its speculation lands strictly before the main
            # machine reaches the target timestep
            self.lookahead = math.ceil(1.0 / self.efficiency) + 1
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")

    def as_dict(self):
        return {
            "rip": self.rip, "period": self.period, "workers": self.workers,
            "efficiency": self.efficiency, "lookahead": self.lookahead,
            "iterated_lookup": self.iterated_lookup,
            "stitch_budget": self.stitch_budget,
            "timestep_table_size": self.timestep_table_size,
            "max_cache_entries": self.max_cache_entries,
            "mode": self.mode, "budget_factor": self.budget_factor,
        }


@dataclass
class RunReport:
    config: dict
    backend: str
    native_icount: int
    t_main: int
    t_total: int
    speedup: float
    max_speedup: float
    hits_timesteps: int
    misses_timesteps: int
    hit_rate: float
    hitrate_speedup_estimate: float
    breakpoints_visited: int
    fast_forwards: int
    fast_forward_icount: int
    speculations_dispatched: int
    speculations_cached: int
    speculations_discarded: int
    stitches: int
    wasted_speculations: int
    entries_total: int
    entries_hit: int
    entries_reused: int
    reuse_events: int
    predictions_checked: int
    predictions_correct: int
    prediction_accuracy: float
    cache_stats: dict
    validated: bool
    output_digest: str
    trace: list = field(default_factory=list, repr=False)

    def as_dict(self):
        d = {k: v for k, v in self.__dict__.items() if k != "trace"}
        return d

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


class OraclePredictor:
    """Ground-truth future states from a shadow machine.

    Prediction cost is not modeled; this is the upper bound for what a
    perfect predictor buys at a given worker count and efficiency.
    """

    def __init__(self, program, rip, period):
        self._vm = Vm(program)
        self.rip = rip
        self.period = period

    def chain(self, z, kmax):
        self._vm.scatter(z, clear_masks=True)
        states = []
        for _ in range(kmax):
            try:
                reason = self._vm.run_until(self.rip, self.period)
            except ExecutionFault:
                break
            if reason is not StopReason.HIT_RIP:
                break
            states.append(self._vm.gather())
        return states

    def comparable_bytes(self, z_true, z_pred):
        return bool(np.array_equal(z_true.buf, z_pred.buf))


class _TimestepTable:
    """Ring of upcoming timesteps with lazy recycling.

    A slot holds the newest timestep that mapped to it; anything older is
    implicitly unmarked. Breakpoint indices grow without bound, the ring
    does not.
    """

    def __init__(self, size):
        if size < 2:
            raise ValueError("table size must be >= 2")
        self.size = size
        self._t = np.full(size, -1, np.int64)
        self._state = np.zeros(size, np.uint8)

    def state_of(self, t):
        s = t % self.size
        if self._t[s] != t:
            return _FREE
        return int(self._state[s])

    def mark(self, t, state):
        s = t % self.size
        self._t[s] = t
        self._state[s] = state

    def clear(self, t):
        s = t % self.size
        if self._t[s] == t:
            self._t[s] = -1
            self._state[s] = _FREE

    def next_assignment(self, current_t, nth):
        """The nth unmarked timestep strictly after current_t."""
        seen = 0
        for t in range(current_t + 1, current_t + 1 + self.size):
            if self.state_of(t) == _FREE:
                seen += 1
                if seen == nth:
                    return t
        raise RuntimeError("timestep table exhausted; raise table_size")


class _Worker:
    __slots__ = ("vm", "busy", "remaining", "entry", "timestep", "cached")

    def __init__(self, vm):
        self.vm = vm
        self.busy = False
        self.remaining = 0.0
        self.entry = None
        self.timestep = -1
        self.cached = False


class Engine:
    """Runs one program speculatively and accounts for every instruction."""

    def __init__(self, program, config, predictor=None):
        if not 0 <= config.rip < program.n_instructions:
            raise ValueError(f"rip {config.rip} out of range")
        if config.workers > 0 and predictor is None:
            raise ValueError("workers > 0 requires a predictor")
        self.program = program
        self.config = config
        self.predictor = predictor
        self.live = live_regs(program, config.rip)

    # -- native reference -------------------------------------------------

    def _native_reference(self, input_bytes):
        vm = Vm(self.program)
        vm.reset(input_bytes=input_bytes)
        vm.run_to_halt()
        start, length = self.program.output_region
        return vm.icount, vm.memory[start:start + length].copy()

    # -- speculation ------------------------------------------------------

    def _speculate(self, worker, z_pred, budget):
        """Run one interval from a predicted state on a worker machine.

        Speculations that cleanly reach the next breakpoint or the final
        halt produce a cache entry; faults and blown budgets are wasted
        work. The virtual cost either way is the instructions executed.
        """
        vm = worker.vm
        vm.scatter(z_pred, clear_masks=True)
        i0 = vm.icount
        entry = None
        try:
            reason = vm.run_until(self.config.rip, self.config.period,
                                  budget=budget)
        except ExecutionFault:
            reason = None
        work = vm.icount - i0
        # a halt is as clean an interval end as the breakpoint itself;
        # caching it lets the final stretch fast-forward too
        if reason in (StopReason.HIT_RIP, StopReason.HALTED):
            entry = CacheEntry(
                z_p=z_pred,
                z_s=vm.gather(),
                m_r=vm.read_mask,
                m_w=vm.write_mask,
                key=fingerprint(z_pred, self.live),
                icount_delta=work,
                timestep_span=1,
            )
        return entry, work

    # -- the run ----------------------------------------------------------

    def run(self, input_bytes=None):
        cfg = self.config
        native_icount, native_output = self._native_reference(input_bytes)

        main = Vm(self.program)
        main.reset(input_bytes=input_bytes)
        cache = Cache(self.live, max_entries=cfg.max_cache_entries)
        table = _TimestepTable(cfg.timestep_table_size)
        workers = [_Worker(Vm(self.program)) for _ in range(cfg.workers)]
        trace = []

        def note(event, **kv):
            if cfg.trace:
                kv["event"] = event
                kv["t"] = current_t
                trace.append(kv)

        t_main = 0
        ff_total = 0
        ff_count = 0
        hits_ts = 0
        misses_ts = 0
        breakpoints = 0
        dispatched = 0
        cached_ok = 0
        discarded = 0
        checked = 0
        correct = 0
        expected = {}
        ema_interval = None
        current_t = 0
        frontier = 0

        # prologue: entry to the first breakpoint is always native
        reason = main.run_until(cfg.rip, 1)
        t_main += main.icount
        if reason is StopReason.HIT_RIP:
            main.clear_masks()
            breakpoints += 1
            halted = False
        else:
            halted = True

        while not halted:
            # (1) completions, before lookup so exact ties land
            for wi, w in enumerate(workers):
                if w.busy and w.remaining <= 1e-9:
                    w.busy = False
                    if w.entry is not None:
                        ok = cache.add(w.entry)
                        if ok:
                            cached_ok += 1
                        else:
                            discarded += 1
                        table.mark(w.timestep, _DONE)
                        if cfg.trace:
                            note("complete", worker=wi, target=w.timestep,
                                 cached=ok)
                    else:
                        # nothing worth keeping; free the slot for retry
                        table.clear(w.timestep)
                        if cfg.trace:
                            note("complete", worker=wi, target=w.timestep,
                                 cached=False)
                    w.entry = None

            # (2) prediction scorecard for this arrival
            z_here = main.gather()
            mispredicted = False
            if current_t in expected:
                z_pred = expected[current_t]
                checked += 1
                if self._prediction_matches(z_here, z_pred):
                    correct += 1
                else:
                    mispredicted = True
            for t in [t for t in expected if t <= current_t]:
                del expected[t]

            # (3) lookup: iterated mode chases the chain hop by hop,
            # stitch mode relies on pre-merged entries and takes one jump
            if not cfg.iterated_lookup and cfg.stitch_budget > 0:
                cache.stitch_pass(cfg.stitch_budget)
            while True:
                entry = cache.lookup(z_here)
                if entry is None:
                    break
                z_here = fast_forward(z_here, entry.z_s, entry.m_w)
                ff_total += entry.icount_delta
                ff_count += 1
                hits_ts += entry.timestep_span
                current_t += entry.timestep_span
                breakpoints += 1
                note("fast_forward", span=entry.timestep_span,
                     icount=entry.icount_delta)
                for t in [t for t in expected if t <= current_t]:
                    del expected[t]
                if not cfg.iterated_lookup:
                    break
            main.scatter(z_here, clear_masks=True)
            if main.halted:
                break

            # an observed misprediction means every completed speculation
            # chained past this point is suspect: unmark those slots so
            # idle workers re-predict them from the corrected state. The
            # stale cache entries stay (they just never match); in-flight
            # workers keep their claims.
            if mispredicted:
                reclaimed = 0
                for t in range(current_t + 1, frontier + 1):
                    if table.state_of(t) == _DONE:
                        table.clear(t)
                        expected.pop(t, None)
                        reclaimed += 1
                if cfg.trace and reclaimed:
                    note("reclaim", slots=reclaimed)

            # (4) dispatch idle workers over a shared prediction chain
            if workers and self.predictor is not None:
                chain = []

                def predicted(k):
                    while len(chain) < k:
                        base = chain[-1] if chain else z_here
                        nxt = self.predictor.chain(base, 1)
                        if not nxt:
                            return None
                        chain.append(nxt[0])
                    return chain[k - 1]

                cap = self._speculation_budget(ema_interval)
                for wi, w in enumerate(workers):
                    if w.busy:
                        continue
                    t_next = table.next_assignment(current_t, cfg.lookahead)
                    z_pred = predicted(t_next - current_t)
                    if z_pred is None:
                        break
                    table.mark(t_next, _SPECULATING)
                    entry, work = self._speculate(w, z_pred, cap)
                    dispatched += 1
                    expected[t_next] = z_pred
                    frontier = max(frontier, t_next)
                    if cfg.trace:
                        note("dispatch", worker=wi, target=t_next,
                             work=work, viable=entry is not None)
                    if entry is None:
                        discarded += 1
                    if cfg.mode == "eager":
                        if entry is not None:
                            if cache.add(entry):
                                cached_ok += 1
                            else:
                                discarded += 1
                            table.mark(t_next, _DONE)
                        else:
                            table.clear(t_next)
                    else:
                        w.busy = True
                        w.remaining = float(work)
                        w.entry = entry
                        w.timestep = t_next

            # (5) advance the main machine one native interval
            i0 = main.icount
            reason = main.run_until(cfg.rip, cfg.period)
            interval = main.icount - i0
            t_main += interval
            misses_ts += 1
            note("native", icount=interval)
            main.clear_masks()
            if reason is StopReason.HIT_RIP:
                current_t += 1
                breakpoints += 1
                ema_interval = interval if ema_interval is None else \
                    (3 * ema_interval + interval) // 4
            else:
                halted = True
            for w in workers:
                if w.busy:
                    w.remaining -= cfg.efficiency * interval

        # ----- reconcile and validate -------------------------------------
        t_total = t_main + ff_total
        start, length = self.program.output_region
        output = main.memory[start:start + length]
        digest = hashlib.sha256(output.tobytes()).hexdigest()

        in_flight = sum(1 for w in workers if w.busy)
        entries = cache.entries()
        entries_hit = sum(1 for e in entries if e.hits > 0)
        entries_reused = sum(1 for e in entries if e.hits > 1)
        reuse_events = sum(max(0, e.hits - 1) for e in entries)
        never_hit = sum(
            1 for e in entries if e.hits == 0 and e.timestep_span == 1)
        denom = hits_ts + misses_ts
        hit_rate = hits_ts / denom if denom else 0.0
        est = float("inf") if hit_rate >= 1.0 else 1.0 / (1.0 - hit_rate)
        report = RunReport(
            config=cfg.as_dict(),
            backend=backend_name(),
            native_icount=int(native_icount),
            t_main=int(t_main),
            t_total=int(t_total),
            speedup=t_total / t_main if t_main else 1.0,
            max_speedup=1.0 + cfg.efficiency * cfg.workers,
            hits_timesteps=int(hits_ts),
            misses_timesteps=int(misses_ts),
            hit_rate=hit_rate,
            hitrate_speedup_estimate=est,
            breakpoints_visited=int(breakpoints),
            fast_forwards=int(ff_count),
            fast_forward_icount=int(ff_total),
            speculations_dispatched=int(dispatched),
            speculations_cached=int(cached_ok),
            speculations_discarded=int(discarded),
            stitches=cache.stats.stitches,
            wasted_speculations=int(discarded + never_hit + in_flight),
            entries_total=len(entries),
            entries_hit=int(entries_hit),
            entries_reused=int(entries_reused),
            reuse_events=int(reuse_events),
            predictions_checked=int(checked),
            predictions_correct=int(correct),
            prediction_accuracy=correct / checked if checked else 0.0,
            cache_stats=cache.stats.as_dict(),
            validated=False,
            output_digest=digest,
            trace=trace,
        )

        if t_total != native_icount:
            raise ValidationFailed(
                f"instruction accounting broke: native={native_icount}, "
                f"main={t_main} + skipped={ff_total} = {t_total}", report)
        if not np.array_equal(output, native_output):
            raise ValidationFailed(
                "speculative output differs from the native run", report)
        report.validated = True
        return report

    def _prediction_matches(self, z_true, z_pred):
        schema = getattr(self.predictor, "schema", None)
        if schema is not None:
            ob = schema.output_bytes
            return bool(np.array_equal(z_true.buf[ob], z_pred.buf[ob]))
        return bool(np.array_equal(z_true.buf, z_pred.buf))

    def _speculation_budget(self, ema_interval):
        base = ema_interval if ema_interval is not None else 65536
        return self.config.budget_factor * max(base, 16) + 1024


def run_program(program, config, predictor=None, input_bytes=None):
    """One-call engine run."""
    return Engine(program, config, predictor).run(input_bytes=input_bytes)
