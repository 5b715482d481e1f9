"""``offloadsim`` command line.

Exit codes: 0 success, 1 oracle mismatch, 2 usage or parse error,
3 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import sys

from .allocators import parse_allocator
from .bench import (
    DEFAULT_ALLOCATORS, DEFAULT_INPUT, GRID_TEAMS, GRID_THREADS, bench_alloc, bench_rpc, run_demo,
)
from .errors import ConfigError, IRError, ParseError, SimError
from .ir import parse_ir
from .lowering import lower_module

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_FAULT = 0, 1, 2, 3


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


def _allocator(text: str) -> str:
    try:
        return str(parse_allocator(text))
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for anything randomized")
    common.add_argument("--json", action="store_true", help="emit JSON lines instead of tables")

    p = argparse.ArgumentParser(prog="offloadsim",
                                description="Simulated device-first offloading runtime.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("demo", parents=[common], help="run the fscanf call-site example")
    d.add_argument("--input", default=DEFAULT_INPUT, help=f"host input text ({DEFAULT_INPUT!r})")
    d.add_argument("--allocator", type=_allocator, default="balanced:32,16")

    a = sub.add_parser("bench-alloc", parents=[common], help="allocator stress grid")
    a.add_argument("--allocator", type=_allocator, action="append",
                   help="generic or balanced:N,M[,ratio]; repeatable (default: both)")
    a.add_argument("--teams", type=_int_list, default=GRID_TEAMS)
    a.add_argument("--threads", type=_int_list, default=GRID_THREADS)
    a.add_argument("--reps", type=int, default=10)
    a.add_argument("--size", type=int, default=64, help="bytes per allocation")

    r = sub.add_parser("bench-rpc", parents=[common], help="per-stage RPC breakdown")
    r.add_argument("--calls", type=int, default=1000)
    r.add_argument("--delay-ms", type=float, default=0.0, help="handler delay per call")

    low = sub.add_parser("lower", parents=[common], help="dump lowering plans of an IR file")
    low.add_argument("ir_file")
    return p


def cmd_demo(args, out) -> int:
    res = run_demo(args.input, args.allocator)
    if args.json:
        print(json.dumps({"plan": res.plan, "values": res.values(), "oracle": res.oracle,
                          "match": res.match}), file=out)
    else:
        print(f"plan    {res.plan}", file=out)
        print(f"input   {args.input!r}", file=out)
        for label, vals in (("device", res.values()), ("oracle", res.oracle)):
            print(f"{label:<7} r={vals['r']} s.f={vals['s.f']} third-arg cell={vals['third']}"
                  f" *p={vals['*p']}", file=out)
        print("match" if res.match else "MISMATCH", file=out)
    return EXIT_OK if res.match else EXIT_MISMATCH


def cmd_bench_alloc(args, out) -> int:
    if args.reps < 3:
        print("offloadsim: --reps must be at least 3", file=sys.stderr)
        return EXIT_USAGE
    allocators = args.allocator or list(DEFAULT_ALLOCATORS)
    if not args.json:
        print(f"{'allocator':<18}{'teams':>6}{'threads':>8}{'min ms':>10}{'median ms':>11}"
              f"{'mean ms':>10}  status", file=out)
    for res in bench_alloc(allocators, args.teams, args.threads, args.reps, args.size,
                           args.seed):
        if args.json:
            print(res.to_json(), file=out)
            continue
        p, s = res.params, res.summary
        nums = (f"{s['min'] * 1e3:>10.2f}{s['median'] * 1e3:>11.2f}{s['mean'] * 1e3:>10.2f}"
                if s else f"{'-':>10}{'-':>11}{'-':>10}")
        status = res.status if res.error is None else f"{res.status}: {res.error}"
        print(f"{p['allocator']:<18}{p['teams']:>6}{p['threads']:>8}{nums}  {status}", file=out)
        out.flush()
    return EXIT_OK


def cmd_bench_rpc(args, out) -> int:
    if args.calls < 1:
        print("offloadsim: --calls must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    res = bench_rpc(args.calls, args.delay_ms / 1e3, args.seed)
    if args.json:
        for t in res["trace"]:
            print(t.to_json(), file=out)
        return EXIT_OK
    print(f"{res['calls']} calls to {res['landing_pad']}, handler delay {args.delay_ms} ms",
          file=out)
    for side in ("device", "host"):
        means, fr = res["mean_ns"][side], res["fractions"][side]
        print(f"{side:<8}{'stage':<10}{'mean us':>10}{'fraction':>10}", file=out)
        for k in means:
            print(f"{'':<8}{k:<10}{means[k] / 1e3:>10.2f}{fr[k]:>10.4f}", file=out)
        print(f"{'':<8}{'total':<10}{sum(means.values()) / 1e3:>10.2f}{sum(fr.values()):>10.4f}",
              file=out)
    return EXIT_OK


def cmd_lower(args, out) -> int:
    try:
        with open(args.ir_file, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        print(f"offloadsim: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        plans = lower_module(parse_ir(text))
    except IRError as e:
        print(f"{args.ir_file}:{e}", file=sys.stderr)
        return EXIT_USAGE
    for p in plans:
        if args.json:
            print(json.dumps({"call_site": p.call_site, "landing_pad": p.landing_pad,
                              "callee_id": p.callee_id, "args": [str(a) for a in p.args]}),
                  file=out)
        else:
            print(p, file=out)
    return EXIT_OK


COMMANDS = {"demo": cmd_demo, "bench-alloc": cmd_bench_alloc, "bench-rpc": cmd_bench_rpc,
            "lower": cmd_lower}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, out)
    except ParseError as e:
        print(f"offloadsim: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SimError as e:
        print(f"offloadsim: runtime fault: {e}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
