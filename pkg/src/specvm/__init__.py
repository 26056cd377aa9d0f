"""specvm: speculative parallelization of sequential register programs.

A sequential program on a small register machine is sped up by treating
execution as a trajectory through state space: learn to predict the state
at future recurring breakpoints, speculate from those predictions on spare
workers, and fast-forward through a cache of verified state transitions.
"""

from .asmlang import AsmError, Diagnostic, Program, candidates, live_regs, parse
from .backend import backend_name
from .compcache import Cache, CacheEntry, CacheStats
from .engine import Engine, EngineConfig, RunReport, ValidationFailed
from .learner import (BitSchema, ModelSet, NothingToPredict, TrainingSet,
                      accuracy, collect, train)
from .machine import ExecutionFault, StopReason, Vm, load_memory_image
from .recognizer import (NoRecurringCandidate, PeriodUndefined, RipChoice,
                         find_period, find_rip, recognize)
from .statevec import (BitMask, StateVector, fast_forward, fingerprint,
                       masked_eq, mix64)

__version__ = "0.1.0"

__all__ = [
    "AsmError", "BitMask", "BitSchema", "Cache", "CacheEntry", "CacheStats",
    "Diagnostic", "Engine", "EngineConfig", "ExecutionFault", "ModelSet",
    "NoRecurringCandidate", "NothingToPredict", "PeriodUndefined", "Program",
    "RipChoice", "RunReport", "StateVector", "StopReason", "TrainingSet",
    "ValidationFailed", "Vm", "accuracy", "backend_name", "candidates",
    "collect", "fast_forward", "find_period", "find_rip", "fingerprint",
    "live_regs", "load_memory_image", "masked_eq", "mix64", "parse",
    "recognize", "train",
]
