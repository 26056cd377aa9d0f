"""Built-in benchmark kernels.

Each kernel is an assembly template plus a seeded input generator. The
templates live next to this module as .asm files; ``generate`` renders one
with concrete sizes, parses it, and produces the input bytes for a seed.
Programs are cached per parameter set, inputs are cheap to regenerate.

The kernels are deliberately different in shape:

* ``readmap``      uniform rounds over a byte array, journaled updates
* ``collatz``      variable-length value trajectories, shared step loop
* ``3sum``         triangular scan whose intervals grow quadratically
* ``ising``        pointer chase over a permuted linked list
* ``dependmap-*``  the minimal A[i] = j; j = f(j) loop, three choices of f
* ``matmul``       uniform row-at-a-time integer matrix product
* ``cov``          triangular column products, intervals shrink
"""

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

from ..asmlang import parse
from ..machine import Vm

INT64_MAX = (1 << 63) - 1

MULMOD_P1 = 1000003
MULMOD_P2 = 65521

# Starting points for mulmod training runs are spaced n-1 steps apart
# along the multiplicative orbit of MULMOD_P1, so run k begins at the
# last state run k-1 observed and MULMOD_SPAN_RUNS runs tile one
# contiguous arc with no seam. Held-out inputs start at random positions
# inside the first SPAN_RUNS-1 stretches, which keeps their whole
# trajectory inside the tiled arc.
MULMOD_BASE = 7
MULMOD_SPAN_RUNS = 8


def _template(name):
    ref = importlib.resources.files(__package__).joinpath(name + ".asm")
    return ref.read_text()


@dataclass
class KernelSpec:
    name: str
    template: str                 # template file stem
    rip_label: str                # recommended breakpoint label
    period: int = 1
    defaults: dict = field(default_factory=dict)
    notes: str = ""

    def params(self, overrides):
        p = dict(self.defaults)
        for k, v in (overrides or {}).items():
            if k not in p:
                raise KeyError(f"{self.name} has no parameter {k!r}")
            p[k] = type(p[k])(v)
        return p


_REGISTRY = {}


def _kernel(spec):
    _REGISTRY[spec.name] = spec
    return spec


_kernel(KernelSpec(
    "readmap", "readmap", "round",
    defaults={"m": 48, "rounds": 80},
    notes="uniform intervals; journal plus array form the output"))

_kernel(KernelSpec(
    "collatz", "collatz", "step",
    defaults={"lo": 0, "width": 24},
    notes="per-step breakpoints; lo=0 derives the window from the seed"))

_kernel(KernelSpec(
    "3sum", "3sum", "outer",
    defaults={"n": 40, "spread": 1000000},
    notes="interval cost grows with the outer index"))

_kernel(KernelSpec(
    "ising", "ising", "hop",
    defaults={"m": 48, "layout_seed": -1},
    notes="linked-list scan; layout permutation does not change the result"))

_kernel(KernelSpec(
    "dependmap-increment", "dependmap", "loop",
    defaults={"n": 320, "j0_range": 64},
    notes="f(j) = j + 1"))

_kernel(KernelSpec(
    "dependmap-mulmod", "dependmap", "loop",
    defaults={"n": 512},
    notes=f"f(j) = {MULMOD_P1} * j mod {MULMOD_P2}"))

_kernel(KernelSpec(
    "dependmap-hash", "dependmap", "loop",
    defaults={"n": 128},
    notes="f(j) = avalanche mix of j"))

_kernel(KernelSpec(
    "matmul", "matmul", "irow",
    defaults={"d": 16},
    notes="uniform intervals, one output row each"))

_kernel(KernelSpec(
    "cov", "cov", "col",
    defaults={"d": 20, "l": 6},
    notes="interval cost shrinks as the column index advances"))


def list_kernels():
    return sorted(_REGISTRY)


def kernel_spec(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown kernel {name!r}; known: {', '.join(list_kernels())}")


# -- template rendering ------------------------------------------------------

def _render_readmap(p):
    m, rounds = p["m"], p["rounds"]
    jend = m + rounds * m
    return _template("readmap").format(
        memsize=jend, m=m, a0=0, j0=m, jend=jend, outlen=jend)


def _render_collatz(p):
    return _template("collatz").format(
        memsize=48, cur=16, out0=24, mix0=32)


def _render_3sum(p):
    n = p["n"]
    return _template("3sum").format(
        memsize=8 * n + 16, inlen=8 * n, bound=8 * n, out0=8 * n)


def _render_ising(p):
    m = p["m"]
    inlen = 8 + 24 * m
    return _template("ising").format(
        memsize=inlen + 16, inlen=inlen, out0=inlen, outid=inlen + 8,
        bigval=INT64_MAX)


_DEPEND_F = {
    "dependmap-increment": ("", "        addi r1, r1, 1\n"),
    "dependmap-mulmod": (
        f"        li r4, {MULMOD_P1}\n        li r3, {MULMOD_P2}\n",
        "        mul r1, r1, r4\n        mod r1, r1, r3\n"),
    "dependmap-hash": ("", "        hash r1, r1\n"),
}


def _render_dependmap(name, p):
    n = p["n"]
    consts, f_body = _DEPEND_F[name]
    return _template("dependmap").format(
        memsize=8 + 8 * n, a0=8, bound=8 * n, outlen=8 * n,
        consts=consts, f_body=f_body)


def _render_matmul(p):
    d = p["d"]
    cell = 8 * d * d
    return _template("matmul").format(
        memsize=3 * cell + 24, inlen=2 * cell, outlen=cell,
        a0=0, b0=cell, c0=2 * cell, aend=cell, bend=2 * cell,
        spk=3 * cell, spbend=3 * cell + 8, spaend=3 * cell + 16,
        rowbytes=8 * d)


def _render_cov(p):
    d, l = p["d"], p["l"]
    xlen = 8 * l * d
    olen = 8 * d * d
    return _template("cov").format(
        memsize=xlen + olen + 24, inlen=xlen, outlen=olen,
        x0=0, xend=xlen, o0=xlen,
        spxend=xlen + olen, spout=xlen + olen + 8, spc=xlen + olen + 16,
        colbytes=8 * l, rowstep=8 * (d + 1))


def render(name, p):
    if name.startswith("dependmap-"):
        return _render_dependmap(name, p)
    return {
        "readmap": _render_readmap,
        "collatz": _render_collatz,
        "3sum": _render_3sum,
        "ising": _render_ising,
        "matmul": _render_matmul,
        "cov": _render_cov,
    }[name](p)


# -- input generators --------------------------------------------------------

def _i64(values):
    return np.asarray(values, np.int64).tobytes()


def _gen_readmap(seed, p):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=p["m"], dtype=np.uint8).tobytes()


def _gen_collatz(seed, p):
    # Each seed selects a window of start values; lo = 0 means "derive
    # from the seed" so distinct seeds give distinct, overlapping windows,
    # all above the range the training windows cover.
    lo = p["lo"]
    if lo <= 0:
        lo = 601 + 2 * (int(seed) % 64)
    return _i64([lo, lo + p["width"]])


def _count_zero_triples(vals):
    hits = 0
    for i in range(2, vals.shape[0]):
        k, j = np.triu_indices(i, 1)
        hits += int(np.count_nonzero(vals[k] + vals[j] == -vals[i]))
    return hits


def _gen_3sum(seed, p):
    # exactly one zero-sum triple, completed by the last element: the find
    # then happens in the last outer round, past the final breakpoint, so
    # the scan rounds the learner observes all look alike
    rng = np.random.default_rng(seed)
    n, spread = p["n"], p["spread"]
    while True:
        vals = rng.integers(-spread, spread + 1, size=n, dtype=np.int64)
        vals[vals == 0] = 1
        x, y = rng.choice(n - 1, size=2, replace=False)
        vals[n - 1] = -(int(vals[x]) + int(vals[y]))
        if _count_zero_triples(vals) == 1:
            return vals.tobytes()


def _gen_ising(seed, p):
    m = p["m"]
    layout = p["layout_seed"] if p["layout_seed"] >= 0 else seed + 1
    energies = np.random.default_rng(seed).choice(
        2 * 10 ** 6, size=m, replace=False).astype(np.int64) - 10 ** 6
    perm = np.random.default_rng(layout).permutation(m)
    base = 8
    nodes = np.zeros((m, 3), np.int64)
    for logical in range(m):
        slot = perm[logical]
        nxt = -1 if logical == m - 1 else base + 24 * int(perm[logical + 1])
        nodes[slot] = (energies[logical], nxt, logical)
    head = base + 24 * int(perm[0])
    return _i64([head]) + nodes.tobytes()


def _gen_depend_increment(seed, p):
    rng = np.random.default_rng(seed)
    return _i64([int(rng.integers(0, p["j0_range"]))])


def _gen_depend_mulmod(seed, p):
    rng = np.random.default_rng(seed)
    span = (MULMOD_SPAN_RUNS - 1) * (p["n"] - 1)
    pos = int(rng.integers(0, span + 1))
    return _i64([MULMOD_BASE * pow(MULMOD_P1, pos, MULMOD_P2) % MULMOD_P2])


def _gen_depend_hash(seed, p):
    rng = np.random.default_rng(seed)
    return _i64([int(rng.integers(0, 1 << 62))])


def _gen_matmul(seed, p):
    rng = np.random.default_rng(seed)
    d = p["d"]
    a = rng.integers(-(1 << 20), 1 << 20, size=(d, d), dtype=np.int64)
    b = rng.integers(-(1 << 20), 1 << 20, size=(d, d), dtype=np.int64)
    # second factor goes to memory transposed so the kernel streams rows
    return a.tobytes() + b.T.copy().tobytes()


def _gen_cov(seed, p):
    rng = np.random.default_rng(seed)
    d, l = p["d"], p["l"]
    x = rng.integers(-(1 << 20), 1 << 20, size=(d, l), dtype=np.int64)
    return x.tobytes()      # column-major: column j is the j-th row here


_GENERATORS = {
    "readmap": _gen_readmap,
    "collatz": _gen_collatz,
    "3sum": _gen_3sum,
    "ising": _gen_ising,
    "dependmap-increment": _gen_depend_increment,
    "dependmap-mulmod": _gen_depend_mulmod,
    "dependmap-hash": _gen_depend_hash,
    "matmul": _gen_matmul,
    "cov": _gen_cov,
}


_PROGRAM_CACHE = {}


def build_program(name, **params):
    """Parsed Program for a kernel, cached per parameter set."""
    spec = kernel_spec(name)
    p = spec.params(params)
    key = (name, tuple(sorted(p.items())))
    if key not in _PROGRAM_CACHE:
        _PROGRAM_CACHE[key] = parse(render(name, p))
    return _PROGRAM_CACHE[key]


def generate(name, seed=0, **params):
    """(Program, input bytes) for one kernel instance."""
    spec = kernel_spec(name)
    p = spec.params(params)
    program = build_program(name, **p)
    return program, _GENERATORS[name](seed, p)


def breakpoint_for(name, program):
    """Recommended (rip, period) for a kernel program."""
    spec = kernel_spec(name)
    return program.labels[spec.rip_label], spec.period


def native_run(program, input_bytes, budget=None):
    """Run a program sequentially; (output bytes, total instruction count)."""
    vm = Vm(program)
    vm.reset(input_bytes)
    vm.run_to_halt(budget=budget)
    if not vm.halted:
        raise RuntimeError("program did not halt within budget")
    start, length = program.output_region
    out = bytes(vm.memory[start:start + length].tobytes())
    return out, vm.icount


# Windows of start values for training collatz models. Together they sweep
# [1, 781), which contains every seed-derived benchmark window plus the
# small values all trajectories funnel through; the peak excursions of the
# benchmark starts appear in the training trajectories the same way.
def collatz_train_windows(k=13, width=60):
    return [(1 + i * width, 1 + (i + 1) * width) for i in range(k)]


def collatz_window_input(lo, hi):
    return _i64([lo, hi])


def mulmod_train_start(run_index, n):
    """Starting j for the run_index-th mulmod training run of length n."""
    return MULMOD_BASE * pow(MULMOD_P1, run_index * (n - 1), MULMOD_P2) % MULMOD_P2


def mulmod_train_input(run_index, n):
    return _i64([mulmod_train_start(run_index, n)])
