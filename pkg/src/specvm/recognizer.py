"""Choosing the recurring instruction pointer and the breakpoint period.

Two profiling passes over a native run. The first counts executions of
every backward-jump target and keeps those that recur at least `threshold`
times; among them the one executed least often wins (coarsest recurring
point, so each interval carries the most work), ties to the smallest ip.
The second pass measures the mean instruction distance between consecutive
arrivals at the chosen ip and picks the smallest period multiple whose
expected interval reaches `min_icount` instructions, so intervals are large
enough to amortize per-breakpoint overhead.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import asmlang
from .machine import Vm


class NoRecurringCandidate(Exception):
    """No backward-jump target recurred often enough to anchor on."""


class PeriodUndefined(Exception):
    """The chosen ip was seen fewer than two times; no interval exists."""


@dataclass
class RipChoice:
    rip: int
    period: int
    mean_interval_icount: float
    expected_breakpoint_icount: float
    candidate_counts: dict          # ip -> executions
    threshold: int
    min_icount: int
    total_icount: int

    def as_dict(self):
        return {
            "rip": self.rip,
            "period": self.period,
            "mean_interval_icount": self.mean_interval_icount,
            "expected_breakpoint_icount": self.expected_breakpoint_icount,
            "candidate_counts": {str(k): v
                                 for k, v in sorted(
                                     self.candidate_counts.items())},
            "threshold": self.threshold,
            "min_icount": self.min_icount,
            "total_icount": self.total_icount,
        }

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def find_rip(program, input_bytes=None, threshold=64, max_icount=None):
    """Pick the recurring ip. Returns (rip, {candidate ip: count})."""
    cands = asmlang.candidates(program)
    vm = Vm(program)
    vm.reset(input_bytes=input_bytes)
    counts = np.zeros(program.n_instructions, np.int64)
    vm.run_to_halt(budget=max_icount, counts=counts)
    table = {ip: int(counts[ip]) for ip in cands}
    eligible = [ip for ip in cands if table[ip] >= threshold]
    if not eligible:
        raise NoRecurringCandidate(
            f"no backward-jump target executed >= {threshold} times "
            f"(candidates: {table})")
    eligible.sort(key=lambda ip: (table[ip], ip))
    return eligible[0], table


def find_period(program, rip, input_bytes=None, min_icount=5000,
                max_intervals=None):
    """Smallest arrival multiple whose interval reaches min_icount.

    Returns (period, mean icount between consecutive rip arrivals).
    """
    vm = Vm(program)
    vm.reset(input_bytes=input_bytes)
    deltas = []
    last = None
    while True:
        reason = vm.run_until(rip, period=1)
        if reason.name != "HIT_RIP":
            break
        now = vm.icount
        if last is not None:
            deltas.append(now - last)
        last = now
        if max_intervals is not None and len(deltas) >= max_intervals:
            break
    if not deltas:
        raise PeriodUndefined(
            f"ip {rip} was reached fewer than twice; cannot size a period")
    mean = float(np.mean(deltas))
    period = max(1, math.ceil(min_icount / mean))
    return period, mean


def recognize(program, input_bytes=None, threshold=64, min_icount=5000,
              rip_override=None, period_override=None):
    """Full recognition: choose rip and period, report the evidence."""
    if rip_override is not None:
        rip = rip_override
        table = {}
        if not 0 <= rip < program.n_instructions:
            raise ValueError(f"rip override {rip} out of range")
    else:
        rip, table = find_rip(program, input_bytes, threshold=threshold)
    if period_override is not None:
        period = period_override
        _, mean = find_period(program, rip, input_bytes,
                              min_icount=min_icount)
    else:
        period, mean = find_period(program, rip, input_bytes,
                                   min_icount=min_icount)
    vm = Vm(program)
    vm.reset(input_bytes=input_bytes)
    vm.run_to_halt()
    return RipChoice(
        rip=rip,
        period=period,
        mean_interval_icount=mean,
        expected_breakpoint_icount=mean * period,
        candidate_counts=table,
        threshold=threshold,
        min_icount=min_icount,
        total_icount=vm.icount,
    )
