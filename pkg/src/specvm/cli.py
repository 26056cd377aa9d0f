"""Command line harness: recognize, train, run, bench, limits, validate.

Each subcommand accepts --config FILE, a plain key = value text file whose
keys are the long flag names with dashes turned into underscores; flags
given on the command line win over the file. Reports are JSON or CSV and
carry no timestamps or environment state, so rerunning a command with the
same config and seeds writes byte-identical files.

Exit codes: 0 success, 1 validation failure, 2 usage or recognition error.
"""

import argparse
import csv
import io
import json
import os
import sys

from . import kernels
from .asmlang import AsmError, parse
from .engine import (EngineConfig, OraclePredictor, ValidationFailed,
                     run_program)
from .learner import (ModelSet, NothingToPredict, accuracy, collect, train)
from .recognizer import (NoRecurringCandidate, PeriodUndefined, recognize)

CSV_FORMAT = "specvm-csv-1"

BENCH_COLUMNS = ["workers", "speedup", "hit_rate", "max_speedup",
                 "bound_1_plus_en", "hitrate_speedup_estimate"]
LIMITS_COLUMNS = ["f", "runs", "per_bit_accuracy", "whole_state_accuracy"]


class UsageError(Exception):
    pass


def _parse_intlist(text):
    """"1,2,4" or "0-19" or a mix of both, inclusive ranges."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            cut = part.index("-", 1)
            lo, hi = int(part[:cut]), int(part[cut + 1:])
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return out


def _parse_params(items):
    p = {}
    for item in items or []:
        for pair in str(item).replace(",", " ").split():
            if "=" not in pair:
                raise UsageError(f"--param wants name=value, got {pair!r}")
            k, v = pair.split("=", 1)
            p[k.strip()] = v.strip()
    return p


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config(path):
    """key = value lines; # starts a comment; later keys override earlier."""
    cfg = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            cfg[k.strip().replace("-", "_")] = v.strip()
    return cfg


def _apply_config(args, parser_keys):
    """Fill still-unset argparse values from the config file."""
    if not getattr(args, "config", None):
        return
    cfg = read_config(args.config)
    unknown = set(cfg) - set(parser_keys)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key, conv in parser_keys.items():
        if getattr(args, key, None) is None and key in cfg:
            setattr(args, key, conv(cfg[key]) if conv else cfg[key])


def _resolve_program(args):
    """Registry kernel name, or a path to an .asm file for ad-hoc programs."""
    name = args.kernel
    if name is None:
        raise UsageError("no kernel given (flag or config key 'kernel')")
    if name.endswith(".asm") or os.path.sep in name:
        with open(name) as fh:
            prog = parse(fh.read())
        return None, prog, b""
    params = _parse_params(args.param)
    seed = args.seed if args.seed is not None else 0
    prog, inp = kernels.generate(name, seed=seed, **params)
    return name, prog, inp


def _resolve_breakpoint(args, name, prog, input_bytes):
    if getattr(args, "rip", None) is not None:
        return args.rip, args.period if args.period is not None else 1
    if name is not None:
        rip, period = kernels.breakpoint_for(name, prog)
        if args.period is not None:
            period = args.period
        return rip, period
    choice = recognize(prog, input_bytes,
                       period_override=args.period)
    return choice.rip, choice.period


def _write_text(path, text):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"# {CSV_FORMAT}"])
    w.writerow(columns)
    for row in rows:
        w.writerow(row)
    _write_text(path, buf.getvalue())


def _fmt(x):
    return f"{x:.6f}" if isinstance(x, float) else str(x)


# -- subcommands -----------------------------------------------------------

def cmd_recognize(args):
    name, prog, inp = _resolve_program(args)
    choice = recognize(prog, inp, threshold=args.threshold,
                       min_icount=args.min_icount,
                       rip_override=args.rip,
                       period_override=args.period)
    _write_text(args.out, choice.to_json() + "\n")
    return 0


def _training_inputs(name, seeds, params):
    return [kernels.generate(name, seed=s, **params)[1] for s in seeds]


def cmd_train(args):
    name, prog, _ = _resolve_program(args)
    seeds = _parse_intlist(args.seeds) if args.seeds else []
    if not seeds:
        raise UsageError("train needs a non-empty --seeds list")
    if name is None:
        raise UsageError("train works on registry kernels only")
    params = _parse_params(args.param)
    inputs = _training_inputs(name, seeds, params)
    rip, period = _resolve_breakpoint(args, name, prog, inputs[0])
    ts = collect(prog, rip, period, inputs,
                 max_breakpoints=args.max_breakpoints)
    model = train(ts, max_depth=args.max_depth)
    model.save(args.model_out)
    per_bit, whole = accuracy(model, ts)
    report = dict(ts.schema_report())
    report.update(model.size_report())
    report["train_per_bit_accuracy"] = per_bit
    report["train_whole_state_accuracy"] = whole
    report["kernel"] = name
    report["seeds"] = seeds
    import json
    _write_text(args.report_out,
                json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def _engine_config(args, rip, period):
    kw = {"rip": rip, "period": period}
    for field, key in [("workers", "workers"), ("efficiency", "efficiency"),
                       ("lookahead", "lookahead"),
                       ("stitch_budget", "stitch_budget"),
                       ("timestep_table_size", "table_size"),
                       ("max_cache_entries", "max_cache_entries"),
                       ("mode", "mode"), ("budget_factor", "budget_factor")]:
        v = getattr(args, key, None)
        if v is not None:
            kw[field] = v
    if getattr(args, "iterated_lookup", None):
        kw["iterated_lookup"] = True
    return EngineConfig(**kw)


def _predictor_for(args, prog, rip, period):
    if args.oracle:
        return OraclePredictor(prog, rip, period), rip, period
    if not args.model:
        raise UsageError("need --model FILE or --oracle")
    model = ModelSet.load(args.model)
    if args.rip is None:
        rip, period = model.rip, model.period
    return model, rip, period


def cmd_run(args):
    name, prog, inp = _resolve_program(args)
    rip, period = _resolve_breakpoint(args, name, prog, inp)
    predictor, rip, period = _predictor_for(args, prog, rip, period)
    cfg = _engine_config(args, rip, period)
    try:
        report = run_program(prog, cfg, predictor, input_bytes=inp)
    except ValidationFailed as e:
        sys.stderr.write(f"validation failed: {e}\n")
        if e.report is not None and args.out:
            _write_text(args.out, e.report.to_json() + "\n")
        return 1
    _write_text(args.out, report.to_json() + "\n")
    return 0


def cmd_bench(args):
    name, prog, inp = _resolve_program(args)
    rip, period = _resolve_breakpoint(args, name, prog, inp)
    predictor, rip, period = _predictor_for(args, prog, rip, period)
    counts = _parse_intlist(args.workers if args.workers is not None
                            else "1,2,4,8")
    rows = []
    for n in counts:
        args.workers = None
        cfg = _engine_config(args, rip, period)
        cfg.workers = n
        report = run_program(prog, cfg, predictor, input_bytes=inp)
        bound = 1.0 + cfg.efficiency * n
        rows.append([n, _fmt(report.speedup), _fmt(report.hit_rate),
                     _fmt(report.max_speedup), _fmt(bound),
                     _fmt(report.hitrate_speedup_estimate)])
    _write_csv(args.out, BENCH_COLUMNS, rows)
    return 0


# Training inputs for the limits sweep. Increment and hash runs are plain
# seeded inputs; mulmod runs start at points spaced along the
# multiplicative orbit so successive runs extend coverage instead of
# retracing it.
_LIMITS_VARIANTS = {
    "increment": ("dependmap-increment",
                  lambda i, n: kernels.generate(
                      "dependmap-increment", seed=i + 1)[1],
                  (1001, 1002, 1003)),
    "mulmod": ("dependmap-mulmod",
               lambda i, n: kernels.mulmod_train_input(i, n),
               (2001, 2002, 2003)),
    "hash": ("dependmap-hash",
             lambda i, n: kernels.generate(
                 "dependmap-hash", seed=i + 1)[1],
             (3001, 3002, 3003)),
}


def cmd_limits(args):
    variants = [v.strip() for v in
                (args.variants or "increment,mulmod,hash").split(",")]
    run_counts = _parse_intlist(args.runs if args.runs is not None
                                else "1-10")
    rows = []
    for variant in variants:
        if variant not in _LIMITS_VARIANTS:
            raise UsageError(f"unknown limits variant {variant!r} "
                             f"(have {sorted(_LIMITS_VARIANTS)})")
        kname, make_input, heldout_seeds = _LIMITS_VARIANTS[variant]
        prog = kernels.build_program(kname)
        rip, period = kernels.breakpoint_for(kname, prog)
        n = kernels.kernel_spec(kname).defaults["n"]
        held_inputs = [kernels.generate(kname, seed=s)[1]
                       for s in heldout_seeds]
        for k in run_counts:
            inputs = [make_input(i, n) for i in range(k)]
            ts = collect(prog, rip, period, inputs)
            model = train(ts, max_depth=args.max_depth)
            held = collect(prog, rip, period, held_inputs, schema=ts.schema)
            per_bit, whole = accuracy(model, held)
            rows.append([variant, k, _fmt(per_bit), _fmt(whole)])
    _write_csv(args.out, LIMITS_COLUMNS, rows)
    return 0


def cmd_validate(args):
    name, prog, _ = _resolve_program(args)
    if name is None:
        raise UsageError("validate works on registry kernels only")
    seeds = _parse_intlist(args.seeds) if args.seeds else [0]
    params = _parse_params(args.param)
    rip, period = _resolve_breakpoint(args, name, prog, b"")
    predictor, rip, period = _predictor_for(args, prog, rip, period)
    results = {}
    failures = 0
    for s in seeds:
        _, inp = kernels.generate(name, seed=s, **params)
        cfg = _engine_config(args, rip, period)
        try:
            report = run_program(prog, cfg, predictor, input_bytes=inp)
            results[str(s)] = {"ok": True, "speedup": report.speedup,
                               "output_digest": report.output_digest}
        except ValidationFailed as e:
            results[str(s)] = {"ok": False, "error": str(e)}
            failures += 1
    import json
    doc = {"kernel": name, "failures": failures, "results": results}
    _write_text(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 1 if failures else 0


# -- argument plumbing -----------------------------------------------------

def _add_common(sub):
    sub.add_argument("kernel", nargs="?",
                     help="registry kernel name, or path to an .asm file")
    sub.add_argument("--config", help="key = value file; flags override it")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--param", action="append", default=None,
                     metavar="NAME=VALUE", help="kernel size parameter")
    sub.add_argument("--rip", type=int, default=None,
                     help="breakpoint instruction index override")
    sub.add_argument("--period", type=int, default=None,
                     help="breakpoint arrival multiple override")
    sub.add_argument("--out", default=None, help="report file (else stdout)")


def _add_engine_flags(sub):
    sub.add_argument("--model", default=None, help="trained model file")
    sub.add_argument("--oracle", action="store_true", default=None,
                     help="use the ground-truth predictor")
    sub.add_argument("--workers", default=None)
    sub.add_argument("--efficiency", type=float, default=None)
    sub.add_argument("--lookahead", type=int, default=None)
    sub.add_argument("--iterated-lookup", dest="iterated_lookup",
                     action="store_true", default=None)
    sub.add_argument("--stitch-budget", dest="stitch_budget", type=int,
                     default=None)
    sub.add_argument("--table-size", dest="table_size", type=int,
                     default=None)
    sub.add_argument("--max-cache-entries", dest="max_cache_entries",
                     type=int, default=None)
    sub.add_argument("--mode", choices=["virtual_time", "eager"],
                     default=None)
    sub.add_argument("--budget-factor", dest="budget_factor", type=int,
                     default=None)


_CONFIG_CONVERTERS = {
    "kernel": None, "seed": int, "param": lambda v: [v], "rip": int,
    "period": int, "out": None, "model": None,
    "oracle": _parse_bool, "workers": None, "efficiency": float,
    "lookahead": int, "iterated_lookup": _parse_bool, "stitch_budget": int,
    "table_size": int, "max_cache_entries": int, "mode": None,
    "budget_factor": int, "seeds": None, "max_depth": int,
    "max_breakpoints": int, "model_out": None, "report_out": None,
    "threshold": int, "min_icount": int, "variants": None, "runs": None,
}


def build_parser():
    ap = argparse.ArgumentParser(
        prog="specvm",
        description="speculative execution of register-machine kernels")
    subs = ap.add_subparsers(dest="command", required=True)

    p = subs.add_parser("recognize", help="find the recurring breakpoint")
    _add_common(p)
    p.add_argument("--threshold", type=int, default=64)
    p.add_argument("--min-icount", dest="min_icount", type=int, default=5000)
    p.set_defaults(fn=cmd_recognize)

    p = subs.add_parser("train", help="fit transition trees from seeded runs")
    _add_common(p)
    p.add_argument("--seeds", default=None, help="e.g. 1,2,3 or 1-10")
    p.add_argument("--max-depth", dest="max_depth", type=int, default=16)
    p.add_argument("--max-breakpoints", dest="max_breakpoints", type=int,
                   default=None)
    p.add_argument("--model-out", dest="model_out", default="model.json")
    p.add_argument("--report-out", dest="report_out", default=None)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("run", help="one engine run with a full report")
    _add_common(p)
    _add_engine_flags(p)
    p.set_defaults(fn=cmd_run)

    p = subs.add_parser("bench", help="speedup across worker counts")
    _add_common(p)
    _add_engine_flags(p)
    p.set_defaults(fn=cmd_bench)

    p = subs.add_parser("limits", help="accuracy vs training runs sweep")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--variants", default=None,
                   help="comma list from: increment, mulmod, hash")
    p.add_argument("--runs", default=None, help="training run counts, 1-10")
    p.add_argument("--max-depth", dest="max_depth", type=int, default=24)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_limits)

    p = subs.add_parser("validate",
                        help="check engine output against native runs")
    _add_common(p)
    _add_engine_flags(p)
    p.add_argument("--seeds", default=None, help="e.g. 0-19")
    p.set_defaults(fn=cmd_validate)

    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        keys = {k: _CONFIG_CONVERTERS.get(k)
                for k in vars(args) if k in _CONFIG_CONVERTERS}
        _apply_config(args, keys)
        return args.fn(args)
    except UsageError as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    except (NoRecurringCandidate, PeriodUndefined) as e:
        sys.stderr.write(f"recognition failed: {e}\n")
        return 2
    except (KeyError, AsmError, NothingToPredict, FileNotFoundError,
            ValueError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
