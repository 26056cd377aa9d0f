"""Learning breakpoint-to-breakpoint state transitions.

Training data comes from native runs: record the state at every breakpoint
and the access masks of every interval between them. The union of read
masks plus the live registers defines the input bytes; the output bytes are
the written bytes restricted to that input set (bytes written but never
read back feed nothing downstream and stay unpredicted; the cache's write
masks cover them at fast-forward time instead).

One small CART classifier is trained per output *bit* on the input bits.
With byte-granular masks an output byte costs eight trees; the win is that
each tree only sees the handful of state bits that matter, not the whole
machine. Prediction overwrites exactly the schema's output bits on a copy
of the given state and leaves every other byte alone.

Before fitting, each output byte's candidate features are narrowed twice.
First to machine state (registers, flags) plus the output's own previous
value: other memory bytes observed alongside an output relate to it only
through whichever run produced them, so trees keyed on them memorize runs
instead of the update rule. Then to a minimal subset that still
functionally determines the output on the training data. Loop counters
correlate perfectly with the values they walk alongside within any single
run, and trees happily key on whichever feature enumerates first; dropping
every byte the output does not need removes that trap instead of hoping
Gini avoids it.

Everything is deterministic: splits maximize Gini improvement with ties to
the lowest feature index, leaves take the majority label with ties to 0,
and byte elimination proceeds in ascending address order with the output's
own byte attempted last.
"""

import json
from dataclasses import dataclass

import numpy as np

from .asmlang import live_regs
from .backend import accelerate
from .machine import Vm
from .statevec import HEADER_BYTES, reg_span


class NothingToPredict(Exception):
    """Training observed no written bytes that feed later intervals."""


@dataclass
class BitSchema:
    """Which state bytes a model reads and which it writes."""

    universe: int
    input_bytes: np.ndarray     # sorted unique linear byte indices
    output_bytes: np.ndarray

    @property
    def n_input_bits(self):
        return int(self.input_bytes.shape[0]) * 8

    @property
    def n_output_bits(self):
        return int(self.output_bytes.shape[0]) * 8

    def as_dict(self):
        return {
            "universe": self.universe,
            "input_bytes": [int(b) for b in self.input_bytes],
            "output_bytes": [int(b) for b in self.output_bytes],
        }


class TrainingSet:
    """Breakpoint transition examples under a fixed schema.

    X holds the input bits of the state at breakpoint t, Y the output bits
    at breakpoint t+1, one row per consecutive pair within a run.
    """

    def __init__(self, schema, X, Y, runs, changed_bytes, untracked_bytes,
                 touched_bytes, state_count, rip=0, period=1):
        self.schema = schema
        self.X = X
        self.Y = Y
        self.runs = runs
        self.changed_bytes = changed_bytes      # bytes differing across steps
        self.untracked_bytes = untracked_bytes  # changed or in the schema
        self.touched_bytes = touched_bytes      # bytes read or written
        self.state_count = state_count
        self.rip = rip
        self.period = period

    @property
    def n_examples(self):
        return self.X.shape[0]

    def schema_report(self):
        """Bit bookkeeping for the dependency-tracking comparison.

        Without read/write tracking, a predictor has to emit every byte it
        ever saw move between breakpoints on top of the schema's own
        outputs; tracking prunes that down to the written bytes that later
        intervals actually consume.
        """
        with_dt = self.schema.n_output_bits
        without_dt = int(self.untracked_bytes) * 8
        return {
            "examples": int(self.n_examples),
            "runs": int(self.runs),
            "state_bits": int(self.schema.universe) * 8,
            "bits_with_dependency_tracking": with_dt,
            "bits_without_dependency_tracking": without_dt,
            "bits_changed": int(self.changed_bytes) * 8,
            "bits_touched": int(self.touched_bytes) * 8,
            "input_bits": self.schema.n_input_bits,
            "tracking_reduction": without_dt / with_dt if with_dt else 0.0,
        }


def _bits_of(states, byte_idx):
    """(n, len(byte_idx)*8) uint8 bit matrix, little endian within bytes."""
    cols = states[:, byte_idx]
    return np.unpackbits(cols, axis=1, bitorder="little")


def collect(program, rip, period, inputs, max_breakpoints=None, schema=None):
    """Run natively on each input, recording breakpoint states and masks.

    The first arrival at rip is breakpoint 0; later breakpoints come every
    `period` arrivals. The prologue's and the final partial interval's
    accesses are not part of the schema (no complete transition observed).

    Passing an existing schema skips derivation and extracts bits under it;
    held-out sets for accuracy measurement must be built against the schema
    of the model they evaluate.
    """
    universe = HEADER_BYTES + program.memsize
    r_union = np.zeros(universe, np.uint8)
    w_union = np.zeros(universe, np.uint8)
    changed = np.zeros(universe, bool)
    run_states = []
    vm = Vm(program)
    for inp in inputs:
        vm.reset(input_bytes=inp)
        if vm.run_until(rip, 1).name != "HIT_RIP":
            continue
        vm.clear_masks()
        bufs = [vm.gather().buf]
        while True:
            if vm.run_until(rip, period).name != "HIT_RIP":
                break
            np.bitwise_or(r_union, vm._rmask, out=r_union)
            np.bitwise_or(w_union, vm._wmask, out=w_union)
            vm.clear_masks()
            bufs.append(vm.gather().buf)
            if max_breakpoints is not None and len(bufs) > max_breakpoints:
                break
        if len(bufs) >= 2:
            states = np.stack(bufs)
            changed |= (states[:-1] != states[1:]).any(axis=0)
            run_states.append(states)

    if not run_states:
        raise NothingToPredict(
            "no run produced two breakpoints; nothing to learn from")

    if schema is None:
        live_bytes = np.zeros(universe, np.uint8)
        for r in live_regs(program, rip):
            lo, hi = reg_span(r)
            live_bytes[lo:hi] = 1
        in_mask = (r_union | live_bytes) != 0
        out_mask = (w_union != 0) & in_mask
        input_bytes = np.nonzero(in_mask)[0].astype(np.int64)
        output_bytes = np.nonzero(out_mask)[0].astype(np.int64)
        if output_bytes.shape[0] == 0:
            raise NothingToPredict("no written byte feeds a later interval")
        schema = BitSchema(universe=universe, input_bytes=input_bytes,
                           output_bytes=output_bytes)
    elif schema.universe != universe:
        raise ValueError("schema universe does not match the program")
    else:
        input_bytes = schema.input_bytes
        output_bytes = schema.output_bytes
    xs = []
    ys = []
    for states in run_states:
        xs.append(_bits_of(states[:-1], input_bytes))
        ys.append(_bits_of(states[1:], output_bytes))
    X = np.concatenate(xs)
    Y = np.concatenate(ys)
    touched = int(np.count_nonzero(r_union | w_union))
    untracked = changed.copy()
    untracked[output_bytes] = True
    state_count = sum(s.shape[0] for s in run_states)
    return TrainingSet(schema, X, Y, runs=len(run_states),
                       changed_bytes=int(np.count_nonzero(changed)),
                       untracked_bytes=int(np.count_nonzero(untracked)),
                       touched_bytes=touched, state_count=state_count,
                       rip=rip, period=period)


# -- CART -----------------------------------------------------------------

def _build_tree(X, y, active, max_depth):
    """Grow one binary classification tree.

    X is the full (n, f) bit matrix, `active` the feature indices worth
    scanning (globally non-constant). Returns parallel node arrays
    (feature, left, right, value); feature -1 marks a leaf, whose value is
    the majority label (ties to 0).
    """
    feat = [0]
    left = [0]
    right = [0]
    value = [0]

    def set_leaf(slot, ones, n):
        feat[slot] = -1
        value[slot] = 1 if 2 * ones > n else 0

    stack = [(0, np.arange(X.shape[0], dtype=np.int64), 0)]
    while stack:
        slot, idx, depth = stack.pop()
        ys = y[idx]
        n = idx.shape[0]
        ones = int(ys.sum())
        if ones == 0 or ones == n or depth >= max_depth or \
                active.shape[0] == 0:
            set_leaf(slot, ones, n)
            continue
        Xs = X[np.ix_(idx, active)]
        n_right = Xs.sum(axis=0, dtype=np.int64)
        ones_right = Xs[ys == 1].sum(axis=0, dtype=np.int64)
        n_left = n - n_right
        ones_left = ones - ones_right
        with np.errstate(divide="ignore", invalid="ignore"):
            p_r = ones_right / n_right
            p_l = ones_left / n_left
            g_r = 1.0 - p_r * p_r - (1.0 - p_r) * (1.0 - p_r)
            g_l = 1.0 - p_l * p_l - (1.0 - p_l) * (1.0 - p_l)
            score = (n_left * g_l + n_right * g_r) / n
        valid = (n_left > 0) & (n_right > 0)
        if not valid.any():
            set_leaf(slot, ones, n)
            continue
        # split even at zero gain: parity-like labels look gainless to
        # every single feature, and only recursing past the tie exposes
        # the structure underneath
        score = np.where(valid, score, np.inf)
        best = int(np.argmin(score))
        f = int(active[best])
        go_right = X[idx, f] == 1
        slot_l = len(feat)
        for arr in (feat, left, right, value):
            arr.append(0)
        slot_r = len(feat)
        for arr in (feat, left, right, value):
            arr.append(0)
        feat[slot] = f
        left[slot] = slot_l
        right[slot] = slot_r
        stack.append((slot_r, idx[go_right], depth + 1))
        stack.append((slot_l, idx[~go_right], depth + 1))

    return (np.asarray(feat, np.int32), np.asarray(left, np.int32),
            np.asarray(right, np.int32), np.asarray(value, np.int8))


def _eval_packed_one(feat, left, right, value, roots, xbits, out):
    # hot path: one state, every tree; jitted on the default backend
    for t in range(roots.shape[0]):
        node = roots[t]
        f = feat[node]
        while f >= 0:
            if xbits[f] == 1:
                node = right[node]
            else:
                node = left[node]
            f = feat[node]
        out[t] = value[node]


_eval_packed_one = accelerate(_eval_packed_one)


class _PackedTrees:
    """All trees concatenated with absolute child indices."""

    def __init__(self, trees):
        roots = []
        off = 0
        feats = []
        lefts = []
        rights = []
        values = []
        for feat, left, right, value in trees:
            roots.append(off)
            feats.append(feat)
            lefts.append(np.where(feat < 0, left, left + off))
            rights.append(np.where(feat < 0, right, right + off))
            values.append(value)
            off += feat.shape[0]
        self.roots = np.asarray(roots, np.int64)
        self.feat = np.concatenate(feats).astype(np.int64)
        self.left = np.concatenate(lefts).astype(np.int64)
        self.right = np.concatenate(rights).astype(np.int64)
        self.value = np.concatenate(values).astype(np.uint8)

    def eval_one(self, xbits):
        out = np.empty(self.roots.shape[0], np.uint8)
        _eval_packed_one(self.feat, self.left, self.right, self.value,
                         self.roots, xbits, out)
        return out

    def eval_many(self, Xbits):
        """Vectorized across rows and trees: one gather per tree level."""
        n = Xbits.shape[0]
        node = np.broadcast_to(self.roots, (n, self.roots.shape[0])).copy()
        while True:
            f = self.feat[node]
            leaf = f < 0
            if leaf.all():
                break
            fx = np.where(leaf, 0, f)
            bits = np.take_along_axis(Xbits, fx, axis=1)
            nxt = np.where(bits == 1, self.right[node], self.left[node])
            node = np.where(leaf, node, nxt)
        return self.value[node]


class ModelSet:
    """One trained tree per output bit, plus the schema to apply them."""

    def __init__(self, schema, trees, max_depth, rip, period):
        self.schema = schema
        self.trees = trees
        self.max_depth = max_depth
        self.rip = rip
        self.period = period
        self._packed = _PackedTrees(trees)

    def eval_bits(self, Xbits):
        return self._packed.eval_many(Xbits)

    def predict(self, z):
        """Predicted state one breakpoint ahead.

        Copies z and overwrites exactly the schema's output bits; every
        byte outside the schema keeps its current value.
        """
        if z.size != self.schema.universe:
            raise ValueError("state size does not match the model schema")
        out = z.clone()
        xbits = np.unpackbits(z.buf[self.schema.input_bytes],
                              bitorder="little")
        bits = self._packed.eval_one(xbits)
        out.buf[self.schema.output_bytes] = np.packbits(bits,
                                                        bitorder="little")
        out.ip = self.rip
        return out

    def predict_k(self, z, k):
        """k-step composition of predict; k=0 returns a plain copy."""
        if k < 0:
            raise ValueError("k must be >= 0")
        cur = z.clone()
        for _ in range(k):
            cur = self.predict(cur)
        return cur

    def chain(self, z, kmax):
        """States predicted 1..kmax breakpoints ahead of z."""
        states = []
        cur = z
        for _ in range(kmax):
            cur = self.predict(cur)
            states.append(cur)
        return states

    def size_report(self):
        nodes = sum(int(t[0].shape[0]) for t in self.trees)
        leaves = sum(int((t[0] < 0).sum()) for t in self.trees)
        return {"trees": len(self.trees), "nodes": nodes, "leaves": leaves,
                "max_depth": self.max_depth}

    def save(self, path):
        doc = {
            "format": "specvm-model",
            "version": 1,
            "schema": self.schema.as_dict(),
            "max_depth": self.max_depth,
            "rip": self.rip,
            "period": self.period,
            "trees": [
                {"feat": t[0].tolist(), "left": t[1].tolist(),
                 "right": t[2].tolist(), "value": t[3].tolist()}
                for t in self.trees
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != "specvm-model":
            raise ValueError("not a model file")
        sd = doc["schema"]
        schema = BitSchema(
            universe=sd["universe"],
            input_bytes=np.asarray(sd["input_bytes"], np.int64),
            output_bytes=np.asarray(sd["output_bytes"], np.int64))
        trees = [
            (np.asarray(t["feat"], np.int32), np.asarray(t["left"], np.int32),
             np.asarray(t["right"], np.int32), np.asarray(t["value"], np.int8))
            for t in doc["trees"]
        ]
        return cls(schema, trees, doc["max_depth"], doc["rip"], doc["period"])


def _pack_bytes(bits):
    return np.packbits(bits, axis=1, bitorder="little")


def _groups_of(Xbytes, cols):
    if not cols:
        return np.zeros(Xbytes.shape[0], np.int64), 1
    sub = np.ascontiguousarray(Xbytes[:, cols])
    void = sub.view([("", np.uint8)] * sub.shape[1]).ravel()
    uniq, g = np.unique(void, return_inverse=True)
    return g.astype(np.int64), uniq.shape[0]


def _determines(Xbytes, yb, cols):
    """Do the input bytes at cols functionally determine output byte yb?"""
    g, ngroups = _groups_of(Xbytes, cols)
    return np.unique(g * 256 + yb).shape[0] == ngroups


def _minimal_bytes(Xbytes, yb, candidates, addrs, self_addr):
    """Backward elimination to a minimal determining byte set.

    Bytes outside the output's own 8-aligned block go first (ascending
    address), then its siblings, then the byte itself. A loop counter and
    the value it walks beside determine each other perfectly inside the
    training runs; eliminating foreign bytes first means each output keeps
    its own true dependencies rather than whichever proxy sorts lower.
    """
    own = self_addr // 8
    keep = list(candidates)
    order = sorted(keep, key=lambda c: (addrs[c] // 8 == own,
                                        addrs[c] == self_addr, addrs[c]))
    current = set(keep)
    for c in order:
        trial = sorted(current - {c})
        if _determines(Xbytes, yb, trial):
            current.discard(c)
    return sorted(current)


def train(training_set, max_depth=16):
    """Fit one tree per schema output bit."""
    X = training_set.X
    Y = training_set.Y
    schema = training_set.schema
    if Y.shape[1] == 0:
        raise NothingToPredict("schema has no output bits")
    spread = X.max(axis=0) != X.min(axis=0) if X.shape[0] else \
        np.zeros(X.shape[1], bool)
    Xbytes = _pack_bytes(X)
    Ybytes = _pack_bytes(Y)
    # columns worth considering at all: any live bit
    cand = [c for c in range(Xbytes.shape[1]) if spread[8 * c:8 * c + 8].any()]
    addrs = [int(b) for b in schema.input_bytes]
    trees = []
    for jb in range(Ybytes.shape[1]):
        ob = int(schema.output_bytes[jb])
        # an output byte may key on machine state (registers, flags) and on
        # its own previous value, never on other memory bytes: data-plane
        # values carried in memory relate to a given output only through
        # whatever run they came from, and trees that key on them memorize
        # runs instead of the update rule
        mine = [c for c in cand
                if addrs[c] < HEADER_BYTES or addrs[c] == ob]
        cols = _minimal_bytes(Xbytes, Ybytes[:, jb], mine, addrs, ob)
        bits = np.concatenate([np.arange(8 * c, 8 * c + 8) for c in cols]) \
            if cols else np.empty(0, np.int64)
        active = np.asarray([b for b in bits if spread[b]], np.int64)
        for j in range(8 * jb, 8 * jb + 8):
            trees.append(_build_tree(X, Y[:, j], active, max_depth))
    return ModelSet(training_set.schema, trees, max_depth,
                    rip=training_set.rip, period=training_set.period)


def accuracy(model, heldout):
    """(per-bit, whole-state) accuracy of model on a held-out TrainingSet."""
    if not np.array_equal(model.schema.input_bytes,
                          heldout.schema.input_bytes) or \
            not np.array_equal(model.schema.output_bytes,
                               heldout.schema.output_bytes):
        raise ValueError("held-out set was not collected under the model's "
                         "schema; pass schema=model.schema to collect()")
    if heldout.n_examples == 0:
        return 0.0, 0.0
    pred = model.eval_bits(heldout.X)
    same = pred == heldout.Y
    per_bit = float(same.mean())
    whole = float(same.all(axis=1).mean())
    return per_bit, whole
