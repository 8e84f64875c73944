"""
Command-line harness.

Subcommands: generate, precompute, run, verify, bench and stats. Every command
writes one JSON report to stdout, or to ``--out`` (``generate`` writes the
particle file there instead). ``--format text`` adds a plain timing table on
stderr for human reading.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
import argparse
import json
import os
import struct
import sys
import time

import numpy as np

from . import __version__
from .fmm import Fmm, FmmConfig, direct, relative_error, set_threads
from .generators import KINDS, Distribution, random_charges, sample
from .lists import build_lists
from .morton import Domain
from .operators import PrecomputeError, precompute
from .persistence import CacheError, save_cache
from .tree import ParticleSet, build_tree

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "FMM_NUM_THREADS"
OPERATORS = ("p2m", "m2m", "m2l", "l2l", "p2l", "m2p", "l2p", "near_field")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


# -- particle files -----------------------------------------------------------

def write_particles(path, particles):
    """uint64 N, then N x 3 positions, then N charges; all little-endian."""
    n = len(particles)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", n))
        fh.write(np.ascontiguousarray(particles.positions, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(particles.charges, dtype="<f8").tobytes())


def read_particles(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read particle file {path}: {exc}") from exc
    if len(data) < 8:
        raise DataError(f"{path}: missing particle count")
    (n,) = struct.unpack("<Q", data[:8])
    if n < 1:
        raise DataError(f"{path}: empty particle file")
    if len(data) != 8 + 32 * n:
        raise DataError(f"{path}: expected {8 + 32 * n} bytes for N={n}, found {len(data)}")
    pos = np.frombuffer(data, dtype="<f8", count=3 * n, offset=8).reshape(n, 3)
    q = np.frombuffer(data, dtype="<f8", count=n, offset=8 + 24 * n)
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(q))):
        raise DataError(f"{path}: non-finite coordinates or charges")
    return ParticleSet(pos.astype(np.float64), q.astype(np.float64))


# -- configuration ------------------------------------------------------------

def _config(args):
    """File config, then environment, then explicit flags (last wins)."""
    values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        unknown = set(values) - set(FmmConfig.__dataclass_fields__)
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
    env = os.environ.get(THREADS_ENV)
    if env is not None:
        try:
            values["threads"] = int(env)
        except ValueError as exc:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    for name in ("p", "n_crit", "alpha_inner", "alpha_outer", "svd_cutoff", "threads",
                 "l2p_cache_local"):
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    try:
        return FmmConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _list_stats(tree, lists):
    return {kind.upper(): s for kind, s in lists.stats(tree).items()}


def _operator_times(timings):
    return {name: float(timings.get(name, 0.0)) for name in OPERATORS}


def _run_report(fmm, phi, n, error=None):
    tree = fmm.tree
    s = fmm.state
    report = {
        "config": fmm.config.to_dict(),
        "threads": fmm.threads,
        "n": n,
        "depth": tree.depth,
        "leaves": tree.n_leaves,
        "setup_times": fmm.setup_timings,
        "operator_times": _operator_times(s.timings),
        "total_time": s.timings["total"],
        "level_calls": dict(s.level_calls),
        "leaf_calls": {k: int(v.sum()) for k, v in s.leaf_calls.items()},
        "lists": _list_stats(tree, fmm.lists),
        "tree_warnings": list(tree.warnings),
    }
    if error is not None:
        report["relative_error"] = error
    if not np.all(np.isfinite(phi)):
        raise NumericalError("non-finite potentials")
    return report


# -- subcommands --------------------------------------------------------------

def cmd_generate(args):
    if args.out is None:
        raise UsageError("generate needs --out")
    try:
        particles = sample(Distribution(args.distribution, args.n, args.seed))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.random_charges:
        particles = random_charges(particles, args.seed)
    try:
        write_particles(args.out, particles)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from exc
    return {"distribution": args.distribution, "n": args.n, "seed": args.seed,
            "path": args.out}, False


def cmd_precompute(args):
    cfg = _config(args)
    if args.cache is None:
        raise UsageError("precompute needs --cache")
    if args.input:
        side = Domain.from_points(read_particles(args.input).positions).side
    elif args.side:
        side = args.side
    else:
        raise UsageError("precompute needs an input file or --side")
    set_threads(cfg.threads)
    t0 = time.perf_counter()
    cache = precompute(cfg.p, side, cfg.alpha_inner, cfg.alpha_outer, cfg.svd_cutoff,
                       p_check=cfg.p_check)
    elapsed = time.perf_counter() - t0
    try:
        save_cache(cache, args.cache)
    except CacheError as exc:
        raise DataError(str(exc)) from exc
    return {"config": cfg.to_dict(), "side": side, "fingerprint": cache.fingerprint,
            "transfer_vectors": len(cache.transfer_vectors), "n_e": cache.n_e,
            "precompute_time": elapsed, "path": args.cache}, False


def _need_input(args):
    if not args.input:
        raise UsageError(f"{args.command} needs an input particle file")
    return read_particles(args.input)


def cmd_run(args, verify=None):
    verify = args.verify if verify is None else verify
    particles = _need_input(args)
    cfg = _config(args)
    fmm = Fmm(particles, cfg, args.cache)
    phi = fmm.run()
    error = None
    if verify:
        t0 = time.perf_counter()
        ref = direct(particles)
        fmm.setup_timings["direct"] = time.perf_counter() - t0
        error = relative_error(phi, ref)
    report = _run_report(fmm, phi, len(particles), error)
    if verify and not error <= args.tol:
        report["status"] = "fail"
        return report, True
    if verify:
        report["status"] = "pass"
    return report, False


def cmd_verify(args):
    return cmd_run(args, verify=True)


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
    return {"mean": float(a.mean()), "std": std}


def cmd_bench(args):
    cfg = _config(args)
    sizes = args.sizes
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise UsageError("--sizes must be strictly ascending")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    rows = []
    for n in sizes:
        particles = sample(Distribution(args.distribution, n, args.seed))
        fmm = Fmm(particles, cfg, args.cache)
        fmm.run()  # warm-up: compilation and first touch of buffers
        totals, per_op = [], {name: [] for name in OPERATORS}
        for _ in range(args.repeats):
            fmm.run()
            totals.append(fmm.state.timings["total"])
            for name, t in _operator_times(fmm.state.timings).items():
                per_op[name].append(t)
        row = {"n": n, "depth": fmm.tree.depth, "leaves": fmm.tree.n_leaves,
               "total": _mean_std(totals),
               "operators": {k: _mean_std(v) for k, v in per_op.items()},
               "direct": None}
        if n <= args.direct_max:
            times = []
            for _ in range(args.direct_repeats):
                t0 = time.perf_counter()
                direct(particles)
                times.append(time.perf_counter() - t0)
            row["direct"] = _mean_std(times)
        rows.append(row)
    return {"config": cfg.to_dict(), "distribution": args.distribution,
            "repeats": args.repeats, "rows": rows,
            "slope": _slope([r["n"] for r in rows], [r["total"]["mean"] for r in rows]),
            "direct_slope": _slope([r["n"] for r in rows if r["direct"]],
                                   [r["direct"]["mean"] for r in rows if r["direct"]])}, False


def _slope(ns, ts):
    if len(ns) < 2:
        return None
    return float(np.polyfit(np.log(ns), np.log(ts), 1)[0])


def cmd_stats(args):
    particles = _need_input(args)
    cfg = _config(args)
    set_threads(cfg.threads)
    t0 = time.perf_counter()
    tree, _ = build_tree(particles, cfg.n_crit)
    t1 = time.perf_counter()
    lists = build_lists(tree)
    t2 = time.perf_counter()
    return {"n": len(particles), "n_crit": cfg.n_crit, "depth": tree.depth,
            "leaves": tree.n_leaves, "nodes": tree.n_nodes,
            "lists": _list_stats(tree, lists),
            "times": {"tree": t1 - t0, "lists": t2 - t1},
            "tree_warnings": list(tree.warnings)}, False


COMMANDS = {"generate": cmd_generate, "precompute": cmd_precompute, "run": cmd_run,
            "verify": cmd_verify, "bench": cmd_bench, "stats": cmd_stats}


# -- text tables --------------------------------------------------------------

def timing_table(report):
    """Plain per-operator timing table for a run or bench report."""
    lines = []
    if "rows" in report:
        names = ("total",) + OPERATORS
        lines.append(f"{'N':>9} " + " ".join(f"{n:>18}" for n in names) + f" {'direct':>18}")
        for row in report["rows"]:
            cells = [row["total"]] + [row["operators"][n] for n in OPERATORS] + [row["direct"]]
            lines.append(f"{row['n']:>9} " + " ".join(
                f"{c['mean']:>9.4f} +- {c['std']:<5.3f}" if c else f"{'-':>18}" for c in cells))
        return "\n".join(lines)
    times = report.get("operator_times")
    if not times:
        return ""
    total = report["total_time"] or 1.0
    lines.append(f"{'operator':<12}{'seconds':>12}{'share':>9}")
    for name in OPERATORS:
        lines.append(f"{name:<12}{times[name]:>12.4f}{100 * times[name] / total:>8.1f}%")
    lines.append(f"{'total':<12}{report['total_time']:>12.4f}")
    return "\n".join(lines)


# -- entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--p", type=int, help="expansion order")
    common.add_argument("--n-crit", dest="n_crit", type=int, help="max particles per leaf")
    common.add_argument("--alpha-inner", dest="alpha_inner", type=float)
    common.add_argument("--alpha-outer", dest="alpha_outer", type=float)
    common.add_argument("--svd-cutoff", dest="svd_cutoff", type=float)
    common.add_argument("--threads", type=int,
                        help=f"worker threads, 0 = all (overrides ${THREADS_ENV})")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--cache", help="operator cache file")
    common.add_argument("--l2p-cache-local", dest="l2p_cache_local",
                        action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--config", help="JSON file with configuration fields")
    common.add_argument("--out", help="output path (default stdout)")
    common.add_argument("--format", choices=("json", "text"), default="json",
                        help="'text' also prints a timing table on stderr")

    parser = _Parser(prog="kifmm", description="Kernel-independent FMM for 3D Laplace.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic particle file")
    g.add_argument("--distribution", choices=KINDS, default="sphere-surface")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--random-charges", action="store_true",
                   help="charges uniform in [-1, 1] instead of unit charges")

    pre = sub.add_parser("precompute", parents=[common], help="build and save operators")
    pre.add_argument("input", nargs="?", help="particle file fixing the domain size")
    pre.add_argument("--side", type=float, help="root cube edge, if no input file")

    for name, text in (("run", "evaluate potentials"),
                       ("verify", "evaluate and compare with direct summation"),
                       ("stats", "tree and interaction-list statistics only")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("input", nargs="?", help="particle file")
        if name == "run":
            sp.add_argument("--verify", action="store_true",
                            help="also compare with direct summation")
        if name != "stats":
            sp.add_argument("--tol", type=float, default=1e-5,
                            help="verification: relative error above which exit code is 3")

    b = sub.add_parser("bench", parents=[common], help="timing study over sizes")
    b.add_argument("--sizes", type=int, nargs="+", required=True)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--distribution", choices=KINDS, default="sphere-surface")
    b.add_argument("--direct-max", dest="direct_max", type=int, default=50_000,
                   help="largest N for the direct-summation column")
    b.add_argument("--direct-repeats", dest="direct_repeats", type=int, default=1)
    return parser


def _emit(report, args):
    text = json.dumps(report, indent=2)
    if args.out and args.command != "generate":
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    if args.format == "text":
        table = timing_table(report)
        if table:
            print(table, file=sys.stderr)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        report, failed = COMMANDS[args.command](args)
        _emit(report, args)
    except UsageError as exc:
        print(f"kifmm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CacheError, OSError) as exc:
        print(f"kifmm: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # raised by tree construction and friends on bad input data
        print(f"kifmm: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, PrecomputeError, np.linalg.LinAlgError) as exc:
        print(f"kifmm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_NUMERIC if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
