"""Acceptance criteria 1 to 12.

Each test records one verdict line (criterion number, PASS/FAIL, measured
detail and wall time against its budget); conftest prints them after the run.
Run alone with ``pytest tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import hashlib
import io
import random
import statistics
import struct
import time

from offloadsim.allocators import AllocatorConfig, make_allocator
from offloadsim.bench import bench_alloc_point, corpus_text
from offloadsim.cli import main as cli_main
from offloadsim.errors import OutOfMemory
from offloadsim.hostlib import run_direct
from offloadsim.interp import Interpreter
from offloadsim.ir import parse_ir
from offloadsim.lowering import (
    Base, Dispatch, DynamicLookup, LoweringPlan, StaticRef, Value, lower_module,
)
from offloadsim.machine import Machine, MachineConfig
from offloadsim.memory import MemorySpace, SimAddress, Space
from offloadsim.protocol import AccessMode, CallRequest
from offloadsim.rpc import build_request
from offloadsim.runtime import (
    RegionDescriptor, StaticBlock, StaticCyclic, worksharing_bounds,
)

from irgen import random_program
from oracles import RefBalanced, RefGeneric, RefOOM, check_partition

R, W, RW = AccessMode.READ, AccessMode.WRITE, AccessMode.READWRITE

RESULTS: dict[int, tuple[bool, str, str]] = {}


def criterion(number: int, title: str, budget_s: float):
    """The wrapped test returns ``(ok, detail)``; a raised exception is a FAIL."""

    def wrap(fn):
        @functools.wraps(fn)
        def test():
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except BaseException as e:
                RESULTS[number] = (False, title, f"raised {e!r}")
                raise
            elapsed = time.perf_counter() - t0
            timed = elapsed < budget_s
            RESULTS[number] = (ok and timed, title,
                               f"{detail}; {elapsed:.2f}s of {budget_s:g}s")
            assert ok, detail
            assert timed, f"took {elapsed:.2f}s, budget {budget_s}s"
        return test
    return wrap


def small_machine(**kw) -> Machine:
    cfg = dict(device_capacity=8 << 20, host_capacity=1 << 20)
    cfg.update(kw)
    return Machine(MachineConfig(**cfg))


# --- 1 ------------------------------------------------------------------------------

@criterion(1, "golden lowering", 1.0)
def test_c01_golden_lowering():
    (plan,) = lower_module(parse_ir(corpus_text()))
    ex = "example"
    want = (
        Value(),
        StaticRef(Base(None, "fmt"), 0, 8, R),
        StaticRef(Base(ex, "s"), 8, 12, RW),
        Dispatch((StaticRef(Base(ex, "i"), 0, 4, W), StaticRef(Base(ex, "s"), 4, 12, RW))),
        DynamicLookup(RW),
    )
    ok = plan.args == want and plan.landing_pad == "__fscanf_ip_fp_ip"
    return ok, str(plan)


# --- 2 and 3: migration ----------------------------------------------------------------

def _digest(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(p if isinstance(p, bytes) else repr(p).encode())
    return int.from_bytes(h.digest(), "little")


class _Case:
    """One randomized call: argument specs, device objects and a handler.

    The handler reads every referenced object through its pointer minus the
    known offset, folds everything into a digest, then patches writable
    objects with bytes derived from that digest. It never writes to Read
    objects, so running it in place is a valid oracle for the migrated call.
    """

    def __init__(self, m: Machine, rng: random.Random):
        self.m = m
        self.rng = rng
        mem = m.device_memory
        self.mark = m.stack.mark()
        self.specs = []
        self.objects = []  # (base, size, mode, const)
        self.heap = []
        for _ in range(rng.randint(0, 8)):
            kind = rng.choice(["int", "float", "host", "ref", "ref", "ref"])
            if kind == "int":
                self.specs.append(("int", rng.randint(-2**63, 2**63 - 1)))
            elif kind == "float":
                self.specs.append(("float", rng.uniform(-1e6, 1e6)))
            elif kind == "host":
                self.specs.append(("host", SimAddress(Space.HOST, rng.randrange(0, 1 << 20))))
            else:
                size = rng.choice([1, 4, 8, 12, 16, 40, 64, 128, 256, 512])
                mode = rng.choice([R, W, RW])
                const = mode == R and rng.random() < 0.3
                data = rng.randbytes(size)
                where = rng.choice(["heap", "static", "stack"])
                if const or where == "static":
                    base = mem.place_static(Space.DEVICE, data, const)
                elif where == "heap":
                    base = m.allocator.allocate(size)
                    mem.write_bytes(base, data)
                    self.heap.append(base)
                else:
                    base = m.stack.push(size, tag=Base("f", f"o{len(self.objects)}"))
                    mem.write_bytes(base, data)
                off = rng.randrange(size)
                how = rng.choice(["static", "dispatch", "lookup"])
                self.objects.append((base, size, mode, const))
                self.specs.append(("ref", len(self.objects) - 1, off, how))
        self.salt = rng.getrandbits(32)

    def handler(self, call) -> int:
        parts = [self.salt]
        for i, spec in enumerate(self.specs):
            if spec[0] == "int":
                parts.append(call.int(i))
            elif spec[0] == "float":
                parts.append(struct.pack("<d", call.float(i)))
            elif spec[0] == "host":
                parts.append(call.raw(i))
            else:
                _, k, off, _ = spec
                size = self.objects[k][1]
                parts.append(call.memory.read_bytes(call.ptr(i) - off, size))
        acc = _digest(*parts)
        for i, spec in enumerate(self.specs):
            if spec[0] != "ref":
                continue
            _, k, off, _ = spec
            _, size, mode, _ = self.objects[k]
            if not mode & W:
                continue
            r = random.Random(acc ^ i)
            base = call.ptr(i) - off
            for _ in range(r.randint(0, 3)):
                at = r.randrange(size)
                n = r.randint(1, size - at)
                call.memory.write_bytes(base + at, r.randbytes(n))
        return acc >> 1

    def plan_and_values(self):
        args, vals, objs = [], [], {}
        for spec in self.specs:
            if spec[0] != "ref":
                args.append(Value())
                vals.append(spec[1])
                continue
            _, k, off, how = spec
            base, size, mode, _ = self.objects[k]
            name = Base("f", f"o{k}")
            objs[name] = base
            ref = StaticRef(name, off, size, mode)
            if how == "static":
                args.append(ref)
            elif how == "dispatch":
                decoy = StaticRef(Base("f", "decoy"), 0, 4, RW)
                args.append(Dispatch((decoy, ref) if self.rng.random() < 0.5 else (ref, decoy)))
            else:
                args.append(DynamicLookup(mode))
            vals.append(base + off)
        return args, vals, objs

    def snapshot(self) -> list[bytes]:
        mem = self.m.device_memory
        return [mem.read_bytes(b, s) for b, s, _, _ in self.objects]

    def restore(self, snap) -> None:
        mem = self.m.device_memory
        for (b, s, _, const), data in zip(self.objects, snap):
            if not const:
                mem.write_bytes(b, data)

    def release(self) -> None:
        for p in self.heap:
            self.m.allocator.deallocate(p)
        self.m.stack.release(self.mark)


@criterion(2, "RPC oracle equivalence (500 cases)", 30.0)
def test_c02_rpc_oracle_equivalence():
    rng = random.Random(2)
    mismatches = []
    kinds = set()
    m = None
    for n in range(500):
        # statics are never reclaimed, so start a fresh machine now and then
        if n % 50 == 0:
            if m is not None:
                m.stop()
            m = small_machine().start()
        try:
            case = _Case(m, rng)
            args, vals, objs = case.plan_and_values()
            kinds |= {type(a).__name__ for a in args}
            m.register_pad("__case", 1, case.handler)
            plan = LoweringPlan(f"case#{n}", "f", None, tuple(args), "__case", "__case", 1)
            before = case.snapshot()
            req = build_request(plan, vals, objs.get, m.find_object)
            got_ret = m.client.issue_call(req)
            got = case.snapshot()
            # oracle: same handler on the device objects themselves, with
            # write-only objects holding the zeroes the protocol defines
            case.restore(before)
            for b, s, mode, _ in case.objects:
                if mode == W:
                    m.device_memory.write_bytes(b, bytes(s))
            want_ret = run_direct(case.handler, m.device_memory, vals)
            want = case.snapshot()
            if got_ret != want_ret or got != want:
                mismatches.append(n)
            case.release()
        except BaseException:
            m.stop()
            raise
    m.stop()
    ok = not mismatches and kinds >= {"Value", "StaticRef", "Dispatch", "DynamicLookup"}
    return ok, f"500 cases, {len(mismatches)} mismatches, classifications {sorted(kinds)}"


@criterion(3, "access-mode semantics", 5.0)
def test_c03_access_modes():
    rng = random.Random(3)
    bad_read = bad_write_in = bad_write_out = 0
    with small_machine() as m:
        mem = m.device_memory
        for _ in range(200):
            objs = []
            for _ in range(rng.randint(1, 6)):
                size = rng.choice([1, 8, 12, 64, 300])
                mode = rng.choice([R, W])
                base = m.allocator.allocate(size)
                mem.write_bytes(base, rng.randbytes(size) if mode == R else b"\xaa" * size)
                objs.append((base, size, mode, rng.randrange(size)))
            seen_in, written = {}, {}

            def scribble(call):
                for i, (_, size, mode, off) in enumerate(objs):
                    start = call.ptr(i) - off
                    if mode == W:
                        seen_in[i] = call.memory.read_bytes(start, size)
                        written[i] = random.Random(i * 7 + size).randbytes(size)
                        call.memory.write_bytes(start, written[i])
                    else:
                        call.memory.write_bytes(start, b"\x5a" * size)
                return 0

            m.register_pad("__scribble", 1, scribble)
            before = [mem.read_bytes(b, s) for b, s, _, _ in objs]
            req = CallRequest(1)
            for b, s, mode, off in objs:
                req.add_ref(b + off, mode, s, off)
            m.client.issue_call(req)
            for i, (b, s, mode, _) in enumerate(objs):
                after = mem.read_bytes(b, s)
                if mode == R:
                    bad_read += after != before[i]
                else:
                    bad_write_in += seen_in[i] != bytes(s)
                    bad_write_out += after != written[i]
                m.allocator.deallocate(b)
    ok = bad_read == bad_write_in == bad_write_out == 0
    return ok, (f"200 calls: {bad_read} Read objects changed, {bad_write_in} Write payloads "
                f"not zeroed, {bad_write_out} Write results lost")


# --- 4 to 6: allocators ------------------------------------------------------------

def _overlaps(live) -> bool:
    return any(b0 + s0 > b1 for (b0, s0), (b1, _) in zip(live, live[1:]))


def _replay_1000(config: AllocatorConfig, seed: int):
    rng = random.Random(seed)
    heap_base = 64
    if config.kind == "generic":
        heap = 24 * 1024
        ref = RefGeneric(heap_base, heap)
    else:
        heap = int(2048 * (config.n_thread_slots - 1 + config.first_chunk_ratio)
                   * config.m_team_slots)
        ref = RefBalanced(heap_base, heap, config.n_thread_slots, config.m_team_slots,
                          config.first_chunk_ratio)
    sp = MemorySpace(Space.DEVICE, heap_base + heap + 64)
    alloc = make_allocator(config, sp, heap_base, heap)
    nt, nm = 2 * config.n_thread_slots, 2 * config.m_team_slots
    live, ooms = [], 0
    for _ in range(1000):
        if live and rng.random() < 0.45:
            victim = live.pop(rng.randrange(len(live)))
            alloc.deallocate(SimAddress(Space.DEVICE, victim))
            ref.free(victim)
        else:
            size, tid, team = rng.randint(1, 400), rng.randrange(nt), rng.randrange(nm)
            try:
                got = alloc.allocate(size, tid, team).offset
            except OutOfMemory:
                got = None
            try:
                want = ref.allocate(size, tid, team)
            except RefOOM:
                want = None
            if got != want:
                return False, ooms
            if got is None:
                ooms += 1
            else:
                live.append(got)
        cur = alloc.live_objects()
        if cur != ref.live() or _overlaps(cur):
            return False, ooms
    return True, ooms


@criterion(4, "allocator oracle", 30.0)
def test_c04_allocator_oracle():
    configs = [AllocatorConfig("generic")] + [
        AllocatorConfig("balanced", n, mm, ratio)
        for n in (1, 32) for mm in (1, 16) for ratio in (1, 4)]
    failed, ooms = [], 0
    for k, cfg in enumerate(configs):
        ok, o = _replay_1000(cfg, 400 + k)
        ooms += o
        if not ok:
            failed.append(str(cfg))
    return not failed, (f"{len(configs)} configurations x 1000 ops, failures {failed}, "
                        f"{ooms} agreed out-of-memory events")


@criterion(5, "watermark reclamation", 1.0)
def test_c05_watermark():
    sizes = (32, 20, 40)
    outcomes = []
    for frees in (["B"], ["C"], ["B", "C"]):
        sp = MemorySpace(Space.DEVICE, 4096)
        a = make_allocator("balanced:1,1,1", sp, 0, 2048)
        ref = RefBalanced(0, 2048, 1, 1, 1)
        ptrs = dict(zip("ABC", (a.allocate(s) for s in sizes)))
        rp = dict(zip("ABC", (ref.allocate(s) for s in sizes)))
        top_before = a.chunk_state(0, 0).top
        for name in frees:
            a.deallocate(ptrs[name])
            ref.free(rp[name])
        got, want = a.chunk_state(0, 0).top, ref.top_of(0, 0)
        outcomes.append((frees, top_before, got, want))
    (_, t0, g_mid, w_mid), (_, _, g_top, w_top), (_, _, g_cas, w_cas) = outcomes
    end_b = rp["B"] + sizes[1]
    end_a = rp["A"] + sizes[0]
    ok = (g_mid == w_mid == t0 and g_top == w_top == end_b and g_cas == w_cas == end_a)
    return ok, (f"free B keeps top {g_mid} (was {t0}); free C gives {g_top} (end of B "
                f"{end_b}); free B,C cascades to {g_cas} (end of A {end_a})")


@criterion(6, "chunk mapping", 5.0)
def test_c06_chunk_mapping():
    wrong = 0
    ratio_ok = True
    for n, mm, ratio in ((32, 16, 4), (5, 3, 1), (7, 2, 2)):
        sp = MemorySpace(Space.DEVICE, 1 << 22)
        a = make_allocator(f"balanced:{n},{mm},{ratio}", sp, 0, 1 << 22)
        ci = a.chunk_index
        for tid in range(1024):
            want_n = tid % n
            for team in range(1024):
                if ci(tid, team) != (want_n, team % mm):
                    wrong += 1
        for m_ in range(mm):
            first = a.chunk_state(0, m_).size
            ratio_ok &= all(first == ratio * a.chunk_state(k, m_).size for k in range(1, n))
    return wrong == 0 and ratio_ok, (f"3 geometries x 1024 x 1024 ids, {wrong} wrong; "
                                     f"first chunks ratio-sized: {ratio_ok}")


# --- 7 to 9: runtime -------------------------------------------------------------------

@criterion(7, "work-sharing partition", 60.0)
def test_c07_worksharing_partition():
    bad = []
    checked = 0
    for sched in (StaticBlock, StaticCyclic(1)):
        for total in (1, 2, 3, 4, 16, 128, 256):
            for trip in range(10_001):
                sets = [worksharing_bounds(g, total, trip, sched) for g in range(total)]
                checked += 1
                if not check_partition(sets, trip):
                    bad.append((str(sched), total, trip))
    return not bad, f"{checked} (schedule, total, trip) cases, {len(bad)} non-partitions"


@criterion(8, "global ids and barrier", 60.0)
def test_c08_ids_and_barrier():
    phases = 1000
    with small_machine() as m:
        mem = m.device_memory
        ids = m.allocator.allocate(8 * 16)
        id_region = RegionDescriptor(1, lambda ctx: mem.atomic_add(ids + 8 * ctx.global_id, 1))
        m.runtime.run_main(lambda ctx: ctx.parallel(id_region, (), 4, 4))
        id_counts = [mem.load(ids + 8 * g, "i64") for g in range(16)]
        ids_ok = id_counts == [1] * 16

        total = 16
        counters = m.allocator.allocate(8 * total)
        cells = m.allocator.allocate(8 * phases)
        violations = m.allocator.allocate(8)

        def body(ctx):
            me = ctx.global_id
            for g in range(1, phases + 1):
                mem.store(counters + 8 * me, "i64", g)
                if me == g % total:
                    mem.store(cells + 8 * (g - 1), "i64", g)
                ctx.barrier()
                # nobody may still be behind phase g, nor ahead of g + 1
                for o in range(total):
                    c = mem.load(counters + 8 * o, "i64")
                    if c < g or c > g + 1:
                        mem.atomic_add(violations, 1)
                if mem.load(cells + 8 * (g - 1), "i64") != g:
                    mem.atomic_add(violations, 1)

        region = RegionDescriptor(2, body, uses_barrier=True)
        m.runtime.run_main(lambda ctx: ctx.parallel(region, (), 4, 4))
        v = mem.load(violations, "i64")
    return ids_ok and v == 0, (f"T=4,K=4 ids each seen {set(id_counts)} time(s); "
                               f"{phases} barrier phases x 16 agents, {v} violations")


def _body_family(k: int, rng: random.Random):
    """Iteration function ``it(mem, i, arrays, alloc, free)`` number ``k``."""
    a, b = rng.randint(1, 97) | 1, rng.randint(0, 1000)
    kind = k % 8

    def it(mem, i, arr, alloc, free):
        out, inp, hist = arr["out"], arr["in"], arr["hist"]
        if kind == 0:
            mem.store(out + 8 * i, "i64", (i * a + b) % (1 << 31))
        elif kind == 1:
            mem.store(out + 8 * i, "f64", i * 0.5 + b)
        elif kind == 2:
            mem.atomic_add(hist + 8 * ((i * a) % 17), 1)
        elif kind == 3:
            n = arr["n"]
            mem.store(out + 8 * ((i * a + b) % n), "i64", mem.load(inp + 8 * i, "i64"))
        elif kind == 4:
            n = arr["n"]
            s = sum(mem.load(inp + 8 * j, "i64") for j in (i - 1, i, i + 1) if 0 <= j < n)
            mem.store(out + 8 * i, "i64", s)
        elif kind == 5:
            mem.atomic_add(hist, i * i + a)
        elif kind == 6:
            p = alloc(16)
            mem.store(p, "i64", i * a)
            mem.store(p + 8, "i64", b)
            mem.store(out + 8 * i, "i64", mem.load(p, "i64") + mem.load(p + 8, "i64"))
            free(p)
        else:
            mem.write_bytes(out + i, bytes([(i ^ a) & 0xFF]))
    return it


def _prepare(m: Machine, n: int, seed: int):
    mem = m.device_memory
    arr = {"n": n, "out": m.allocator.allocate(8 * n), "in": m.allocator.allocate(8 * n),
           "hist": m.allocator.allocate(8 * 17)}
    r = random.Random(seed)
    mem.write_bytes(arr["in"], b"".join(struct.pack("<q", r.randint(-1000, 1000))
                                        for _ in range(n)))
    mem.write_bytes(arr["out"], bytes(8 * n))
    mem.write_bytes(arr["hist"], bytes(8 * 17))
    return arr


def _arrays(mem, arr) -> bytes:
    n = arr["n"]
    return (mem.read_bytes(arr["out"], 8 * n) + mem.read_bytes(arr["in"], 8 * n)
            + mem.read_bytes(arr["hist"], 8 * 17))


@criterion(9, "kernel-split equivalence (20 bodies)", 30.0)
def test_c09_kernel_split_equivalence():
    geoms = [(1, 1), (2, 3), (4, 4), (3, 7), (8, 2), (16, 8), (5, 1), (1, 9)]
    scheds = [StaticBlock, StaticCyclic(1), StaticCyclic(3)]
    diffs = []
    changed = 0
    for k in range(20):
        n = random.Random(k).randint(0, 300)
        it = _body_family(k, random.Random(100 + k))
        teams, threads = geoms[k % len(geoms)]
        sched = scheds[k % len(scheds)]
        states = []
        for split in (True, False):
            with small_machine(allocator="balanced:4,2", pool_width=8) as m:
                arr = _prepare(m, max(n, 1), seed=k)
                mem = m.device_memory
                initial = _arrays(mem, arr)
                if split:
                    def body(ctx, it=it, arr=arr):
                        for i in ctx.iterations():
                            it(ctx.memory, i, arr, ctx.allocate, ctx.free)

                    region = RegionDescriptor(k + 1, body, trip_count=n, schedule=sched)
                    m.runtime.run_main(lambda ctx: ctx.parallel(region, (), teams, threads))
                else:
                    for i in range(n):
                        it(mem, i, arr, m.allocator.allocate, m.allocator.deallocate)
                states.append((_arrays(mem, arr), m.allocator.live_objects() == []))
                if split and states[0][0] != initial:
                    changed += 1
        if states[0] != states[1]:
            diffs.append(k)
    return not diffs, (f"20 bodies over 8 geometries and 3 schedules, {changed} changed "
                       f"memory, differing: {diffs}")


# --- 10 and 11: benchmarks ----------------------------------------------------------------

def _stage_table(argv):
    out = io.StringIO()
    code = cli_main(argv, out)
    fractions: dict[str, dict[str, float]] = {}
    side = None
    for line in out.getvalue().splitlines()[1:]:
        cols = line.split()
        if cols and cols[0] in ("device", "host"):
            side = cols[0]
            fractions[side] = {}
        elif side and len(cols) == 3:
            fractions[side][cols[0]] = float(cols[2])
    return code, fractions


@criterion(10, "stage accounting", 60.0)
def test_c10_stage_accounting():
    code, plain = _stage_table(["bench-rpc", "--calls", "1000"])
    code_d, delayed = _stage_table(["bench-rpc", "--calls", "1000", "--delay-ms", "1"])
    sums = {side: round(sum(v for k, v in fr.items() if k != "total"), 4)
            for side, fr in plain.items()}
    sums_d = {side: round(sum(v for k, v in fr.items() if k != "total"), 4)
              for side, fr in delayed.items()}
    wait = delayed["device"]["wait"]
    ok = (code == code_d == 0
          and all(abs(s - 1) <= 0.001 for s in list(sums.values()) + list(sums_d.values()))
          and wait > 0.8)
    return ok, (f"fraction sums {sums} and with 1 ms delay {sums_d} (table shows 4 decimals); "
                f"device wait fraction at 1 ms delay {wait:.3f}; undelayed wait "
                f"{plain['device']['wait']:.3f}")


# medians may dip by this much between neighbouring grid points and still
# count as non-decreasing; the endpoints must still rise strictly
NOISE = 0.10


@criterion(11, "contention property", 300.0)
def test_c11_contention():
    reps = 10
    gen = {t: bench_alloc_point("generic", t, 32, reps) for t in (1, 32, 64, 128, 256)}
    bal = bench_alloc_point("balanced:32,16", 256, 32, reps)
    med = {t: r.summary["median"] for t, r in gen.items()}
    seq = [med[t] for t in sorted(med)]
    monotone = all(b >= a * (1 - NOISE) for a, b in zip(seq, seq[1:])) and seq[-1] > seq[0]
    faster = bal.status == "ok" and bal.summary["median"] < med[256]
    ms = ", ".join(f"{t}:{med[t] * 1e3:.1f}" for t in sorted(med))
    return monotone and faster, (f"generic medians ms by teams {{{ms}}}; balanced at 256x32 "
                                 f"{bal.summary['median'] * 1e3:.1f} ms vs generic "
                                 f"{med[256] * 1e3:.1f} ms")


# --- 12 ---------------------------------------------------------------------------------

@criterion(12, "analysis soundness (200 programs)", 60.0)
def test_c12_analysis_soundness():
    counts = {"StaticRef": 0, "Dispatch": 0, "DynamicLookup": 0, "Value": 0}
    violations = []
    handlers = {name: (lambda call: len(call)) for name in ("sink", "peek", "fill", "mix")}

    for seed in range(200):
        ir = parse_ir(random_program(seed))
        plans = lower_module(ir)

        def check(interp, plan, argvals, seed=seed):
            ext = interp.ir.extern(plan.callee)
            for i, (cls, v) in enumerate(zip(plan.args, argvals)):
                if not isinstance(v, SimAddress):
                    continue
                counts[type(cls).__name__] += 1
                hit = interp.machine.find_object(v)

                def holds(ref):
                    base = interp.resolve_base(ref.obj)
                    return (hit is not None and base == hit.base and v - base == ref.offset
                            and hit.size == ref.size)

                if isinstance(cls, StaticRef):
                    good = holds(cls)
                elif isinstance(cls, Dispatch):
                    good = sum(holds(c) for c in cls.candidates) == 1
                elif isinstance(cls, DynamicLookup):
                    good = True
                else:
                    good = i < len(ext.params) and ext.params[i] in ("opaque", "value")
                if not good:
                    violations.append((seed, plan.call_site, i, str(cls)))

        with small_machine(device_capacity=4 << 20, allocator="generic") as m:
            interp = Interpreter(m, ir, plans, handlers, on_call=check)
            m.runtime.run_main(lambda ctx: interp.run("main"))
    exercised = all(counts[k] > 0 for k in ("StaticRef", "Dispatch", "DynamicLookup"))
    return not violations and exercised, (f"pointer arguments checked {counts}, "
                                          f"violations {violations[:3]}")
