"""Scenarios behind the command line: demo, allocator stress, RPC stages.

Every benchmark yields :class:`BenchResult` records; their JSON-lines form is
documented in ``docs/bench-schema.md`` and round-trips losslessly.
"""

from __future__ import annotations

import io
import json
import statistics
import struct
import time
from dataclasses import asdict, dataclass, field
from importlib.resources import files as _resources

from .allocators import parse_allocator
from .errors import OutOfMemory, RegionFault
from .hostlib import scan
from .interp import Interpreter
from .ir import parse_ir
from .lowering import lower_module
from .machine import Machine, MachineConfig
from .memory import Space
from .protocol import AccessMode, CallRequest, mangle
from .rpc import mean_stages
from .runtime import RegionDescriptor

SCHEMA_VERSION = 1
GRID_TEAMS = (1, 32, 64, 128, 256)
GRID_THREADS = (1, 32, 64, 128, 256)
DEFAULT_ALLOCATORS = ("generic", "balanced:32,16")
DEFAULT_INPUT = "3.5 7 9"


@dataclass
class BenchResult:
    benchmark: str
    params: dict
    repetitions: int
    durations_s: list[float] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValueError("a benchmark needs at least 3 repetitions")
        if any(d <= 0 for d in self.durations_s):
            raise ValueError("durations must be positive")
        if self.durations_s and not self.summary:
            self.summary = summarize(self.durations_s)

    def to_json(self) -> str:
        return json.dumps({"schema": SCHEMA_VERSION, **asdict(self)}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> BenchResult:
        d = json.loads(line)
        if d.pop("schema", None) != SCHEMA_VERSION:
            raise ValueError("unsupported bench record schema")
        return cls(**d)


def summarize(durations: list[float]) -> dict:
    return {"min": min(durations), "median": statistics.median(durations),
            "mean": statistics.fmean(durations)}


# --- allocator stress ---------------------------------------------------------

def _alloc_cycle(size: int):
    pattern = bytes(range(size % 256)) * (size // 256 + 1)

    # every agent allocates at kernel start, uses the block, then frees it
    def body(ctx):
        p = ctx.allocate(size)
        yield
        ctx.memory.write_bytes(p, pattern[:size])
        yield
        ctx.free(p)
    return body


def bench_alloc_point(allocator: str, teams: int, threads: int, reps: int = 10,
                      size: int = 64, seed: int = 0, pool_width: int = 32,
                      device_capacity: int = 64 << 20) -> BenchResult:
    """Time ``reps`` launches of a kernel whose every agent allocates,
    writes and frees one block."""
    params = {"allocator": str(parse_allocator(allocator)), "teams": teams, "threads": threads,
              "size": size, "seed": seed}
    cfg = MachineConfig(device_capacity=device_capacity, host_capacity=1 << 20,
                        allocator=allocator, agent_limit=max(4096, teams * threads),
                        pool_width=pool_width)
    region = RegionDescriptor(1, _alloc_cycle(size))
    durations = []
    with Machine(cfg) as m:
        m.runtime.register(region)

        def main(ctx):
            for _ in range(reps):
                t = time.perf_counter()
                ctx.parallel(region, (), teams, threads)
                durations.append(time.perf_counter() - t)

        try:
            m.runtime.run_main(main)
        except RegionFault as e:
            if isinstance(e.cause, OutOfMemory):
                return BenchResult("alloc", params, reps, status="failed",
                                   error=f"out of memory: {e.cause}")
            raise
    return BenchResult("alloc", params, reps, durations)


def bench_alloc(allocators=DEFAULT_ALLOCATORS, teams=GRID_TEAMS, threads=GRID_THREADS,
                reps: int = 10, size: int = 64, seed: int = 0):
    for a in allocators:
        for t in teams:
            for k in threads:
                yield bench_alloc_point(a, t, k, reps, size, seed)


# --- RPC stage breakdown ------------------------------------------------------

BUFFER_SIZE = 128


def bench_rpc(n_calls: int = 1000, handler_delay_s: float = 0.0, seed: int = 0) -> dict:
    """Issue ``n_calls`` fprintf-style calls (a read-only format string and a
    128-byte read-write buffer) and return mean stage times and fractions."""
    if n_calls < 1:
        raise ValueError("n_calls must be at least 1")
    cfg = MachineConfig(device_capacity=4 << 20, host_capacity=1 << 20,
                        allocator="generic", handler_delay_s=handler_delay_s)
    with Machine(cfg) as m:
        sink = io.StringIO()
        fd = m.files.open(sink, "sink")
        pad = mangle("fprintf", ["cp"])
        m.register_pad(pad, 1, m.library["fprintf"])
        mem = m.device_memory
        fmt = mem.place_static(Space.DEVICE, b"%s\n\0", True)
        buf = m.allocator.allocate(BUFFER_SIZE)
        text = f"call record {seed}".encode()
        mem.write_bytes(buf, text + bytes(BUFFER_SIZE - len(text)))
        m.client.trace.clear()

        def main(ctx):
            for _ in range(n_calls):
                req = CallRequest(1)
                req.add_value(fd)
                req.add_ref(fmt, AccessMode.READ, 4, 0)
                req.add_ref(buf, AccessMode.READWRITE, BUFFER_SIZE, 0)
                m.client.issue_call(req)

        m.runtime.run_main(main)
        trace = list(m.client.trace)
    means = mean_stages(trace)
    fractions = {side: _fractions(v) for side, v in means.items()}
    return {"calls": n_calls, "handler_delay_s": handler_delay_s, "landing_pad": pad,
            "mean_ns": means, "fractions": fractions, "trace": trace}


def _fractions(d: dict) -> dict:
    total = sum(d.values())
    return {k: (v / total if total else 0.0) for k, v in d.items()}


# --- demo ---------------------------------------------------------------------

def corpus_text(name: str = "fscanf_example.ir") -> str:
    return _resources("offloadsim.corpus").joinpath(name).read_text()


@dataclass
class DemoOutcome:
    plan: str
    r: int
    sf: float
    third: int
    p: int
    oracle: dict
    match: bool

    def values(self) -> dict:
        return {"r": self.r, "s.f": self.sf, "third": self.third, "*p": self.p}


def run_demo(text: str = DEFAULT_INPUT, allocator: str = "balanced:32,16") -> DemoOutcome:
    ir = parse_ir(corpus_text())
    plans = lower_module(ir)
    cfg = MachineConfig(device_capacity=8 << 20, host_capacity=1 << 20, allocator=allocator)
    with Machine(cfg) as m:
        interp = Interpreter(m, ir, plans)
        fd = m.files.open_text(text)
        mem = m.device_memory
        mem.store(interp.global_address("fd"), "u64", fd.raw)
        m.runtime.run_main(lambda ctx: interp.run("main"))
        r, third, sf, p = struct.unpack("<iifi", mem.read_bytes(interp.global_address("out"), 16))
        oracle = host_oracle(m, text, ir.global_("fmt").init)
    got = {"r": r, "s.f": sf, "third": third, "*p": p}
    return DemoOutcome(str(plans[0]), r, sf, third, p, oracle, got == oracle)


def host_oracle(m: Machine, text: str, fmt: bytes) -> dict:
    """The same scanf run directly on host cells, no device involved."""
    hm = m.host_memory
    f = hm.place_static(Space.HOST, bytes(4))
    third = hm.place_static(Space.HOST, bytes(4))
    p = hm.place_static(Space.HOST, bytes(4))
    r, _ = scan(fmt.rstrip(b"\0"), text, hm, iter([f, third, p]))
    return {"r": r, "s.f": hm.load(f, "f32"), "third": hm.load(third, "i32"),
            "*p": hm.load(p, "i32")}
