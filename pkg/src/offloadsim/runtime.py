"""Multi-team execution: one initial agent, parallel regions as kernels.

The initial agent runs the sequential program. When it meets a parallel
region it asks the host, through the reserved callee 0, to launch a kernel of
``T`` teams with ``K`` threads each, then blocks until every agent of that
kernel has finished. Agents see continuous global ids ``team * K + local``.
"""

from __future__ import annotations

import inspect
import itertools
import math
import queue
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable

from .errors import DeadlockError, LaunchRejected, RegionFault
from .memory import SimAddress
from .protocol import AccessMode, CallRequest, KERNEL_LAUNCH_CALLEE

# launch-pad return codes
E2BIG = -7
ENOENT = -2


# --- ids and work sharing -----------------------------------------------------

def global_thread_id(team: int, local: int, threads_per_team: int) -> int:
    if not 0 <= local < threads_per_team:
        raise ValueError(f"local id {local} outside team of {threads_per_team}")
    return team * threads_per_team + local


@dataclass(frozen=True)
class Schedule:
    kind: str = "static_block"
    chunk: int = 1

    def __post_init__(self):
        if self.kind not in ("static_block", "static_cyclic") or self.chunk < 1:
            raise ValueError(f"bad schedule {self.kind}({self.chunk})")

    def __str__(self) -> str:
        return "StaticBlock" if self.kind == "static_block" else f"StaticCyclic({self.chunk})"


StaticBlock = Schedule()


def StaticCyclic(chunk: int = 1) -> Schedule:  # noqa: N802 - reads like the enum variant
    return Schedule("static_cyclic", chunk)


def worksharing_bounds(global_id: int, total: int, trip_count: int,
                       schedule: Schedule = StaticBlock) -> list[range]:
    """Iterations owned by ``global_id`` as a list of ranges."""
    if not 0 <= global_id < total:
        raise ValueError(f"id {global_id} outside {total} threads")
    if trip_count <= 0:
        return []
    if schedule.kind == "static_block":
        block = math.ceil(trip_count / total)
        lo = min(global_id * block, trip_count)
        return [range(lo, min(lo + block, trip_count))] if lo < trip_count else []
    c = schedule.chunk
    if c == 1:
        return [range(global_id, trip_count, total)] if global_id < trip_count else []
    return [range(s, min(s + c, trip_count))
            for s in range(global_id * c, trip_count, total * c)]


def iterations(bounds: list[range]):
    return itertools.chain.from_iterable(bounds)


# --- regions and launches -------------------------------------------------------

@dataclass(frozen=True)
class RegionDescriptor:
    """A parallel region turned kernel.

    ``body(ctx)`` runs once per agent. Agents beyond the pool width share
    worker threads; a body written as a generator is resident with its
    siblings: each ``yield`` lets every other agent on the same worker reach
    its own next ``yield`` first, the way all threads of a real kernel are
    live at once. A ``yield`` is not a barrier across workers.
    """

    region_id: int
    body: Callable
    trip_count: int = 0
    schedule: Schedule = StaticBlock
    uses_barrier: bool = False


@dataclass(frozen=True)
class KernelLaunch:
    region_id: int
    num_teams: int
    threads_per_team: int
    arg_block: SimAddress | None = None

    def __post_init__(self):
        if self.num_teams < 1 or self.threads_per_team < 1:
            raise ValueError("a launch needs at least one team and one thread")

    @property
    def agents(self) -> int:
        return self.num_teams * self.threads_per_team


class GlobalBarrier:
    """Sense-reversing barrier across every agent of one kernel."""

    def __init__(self, expected: int, watchdog_s: float = 30.0):
        self.expected = expected
        self.watchdog_s = watchdog_s
        self.count = 0
        self.sense = False
        self.phase = 0
        self._cv = threading.Condition()
        self._broken: BaseException | None = None

    def wait(self, local_sense: bool) -> bool:
        """Arrive with the agent's current sense; returns its next sense."""
        local_sense = not local_sense
        if self.expected == 1:
            return local_sense
        with self._cv:
            if self._broken is not None:
                raise self._broken
            self.count += 1
            if self.count == self.expected:
                self.count = 0
                self.phase += 1
                self.sense = local_sense
                self._cv.notify_all()
                return local_sense
            ok = self._cv.wait_for(
                lambda: self.sense == local_sense or self._broken is not None, self.watchdog_s)
            if self._broken is not None:
                raise self._broken
            if not ok:
                self._broken = DeadlockError(
                    f"barrier phase {self.phase}: {self.count} of {self.expected} arrived")
                self._cv.notify_all()
                raise self._broken
            return local_sense

    def abort(self, cause: BaseException) -> None:
        with self._cv:
            if self._broken is None:
                self._broken = cause
            self._cv.notify_all()


@dataclass
class AgentContext:
    """What a region body sees: its ids, its iterations and the machine."""

    runtime: MultiTeamRuntime
    region: RegionDescriptor
    launch: KernelLaunch
    team: int
    local: int
    args: tuple[int, ...]
    barrier_obj: GlobalBarrier | None
    _sense: bool = False

    @property
    def K(self) -> int:  # noqa: N802
        return self.launch.threads_per_team

    @property
    def T(self) -> int:  # noqa: N802
        return self.launch.num_teams

    @property
    def global_id(self) -> int:
        return self.team * self.launch.threads_per_team + self.local

    @property
    def total(self) -> int:
        return self.launch.agents

    @property
    def memory(self):
        return self.runtime.machine.device_memory

    def iterations(self):
        return iterations(worksharing_bounds(self.global_id, self.total,
                                             self.region.trip_count, self.region.schedule))

    def barrier(self) -> None:
        if self.barrier_obj is None:
            raise RuntimeError(f"region {self.region.region_id} was not declared with barriers")
        self._sense = self.barrier_obj.wait(self._sense)

    def allocate(self, size: int) -> SimAddress:
        return self.runtime.machine.allocator.allocate(size, self.local, self.team)

    def free(self, addr: SimAddress) -> None:
        self.runtime.machine.allocator.deallocate(addr)

    def arg_ptr(self, i: int) -> SimAddress | None:
        return SimAddress.from_raw(self.args[i])

    def arg_int(self, i: int) -> int:
        v = self.args[i]
        return v - (1 << 64) if v >> 63 else v

    def parallel(self, *a, **kw):
        return self.runtime.encounter_parallel(*a, **kw)


# --- agent pool -------------------------------------------------------------------

_agent = threading.local()


def in_parallel_kernel() -> bool:
    return getattr(_agent, "kernel", False)


class AgentPool:
    """Device agents kept alive between kernels."""

    def __init__(self):
        self._tasks: queue.SimpleQueue = queue.SimpleQueue()
        self._threads: list[threading.Thread] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._threads)

    def ensure(self, n: int) -> None:
        with self._lock:
            while len(self._threads) < n:
                t = threading.Thread(target=self._worker, daemon=True,
                                     name=f"device-agent-{len(self._threads)}")
                t.start()
                self._threads.append(t)

    def submit(self, fn: Callable[[], None]) -> None:
        self._tasks.put(fn)

    def _worker(self) -> None:
        _agent.kernel = True
        while True:
            fn = self._tasks.get()
            if fn is None:
                return
            fn()

    def shutdown(self) -> None:
        with self._lock:
            for _ in self._threads:
                self._tasks.put(None)
            for t in self._threads:
                t.join()
            self._threads.clear()


def _interleave(agents: list, run: _Running) -> None:
    """Advance co-resident agents round-robin, one yield at a time."""
    while agents and run.fault is None:
        still = []
        for g in agents:
            try:
                next(g)
                still.append(g)
            except StopIteration:
                pass
        agents = still


@dataclass
class _Running:
    launch: KernelLaunch
    remaining: int
    done: threading.Event = field(default_factory=threading.Event)
    fault: BaseException | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)
    barrier: GlobalBarrier | None = None


# --- the runtime ------------------------------------------------------------------

class MultiTeamRuntime:
    def __init__(self, machine, agent_limit: int = 4096, pool_width: int = 32,
                 watchdog_s: float = 30.0):
        self.machine = machine
        self.agent_limit = agent_limit
        self.pool_width = pool_width
        self.watchdog_s = watchdog_s
        self.regions: dict[int, RegionDescriptor] = {}
        self.launches: list[KernelLaunch] = []
        self.pool = AgentPool()
        self._running: dict[int, _Running] = {}
        self._tickets = itertools.count(1)

    def register(self, region: RegionDescriptor) -> RegionDescriptor:
        self.regions[region.region_id] = region
        return region

    # host side of callee 0
    def launch_pad(self, call) -> int:
        region_id, teams, threads = call.int(0), call.int(1), call.int(2)
        region = self.regions.get(region_id)
        if region is None:
            return ENOENT
        if teams < 1 or threads < 1 or teams * threads > self.agent_limit:
            return E2BIG
        args: tuple[int, ...] = ()
        device_block = None
        if len(call) > 3:
            size = call.descriptors[3].obj_size
            args = struct.unpack(f"<{size // 8}Q", call.memory.read_bytes(call.ptr(3), size))
            device_block = call.descriptors[3].addr
        launch = KernelLaunch(region_id, teams, threads, device_block)
        ticket = next(self._tickets)
        self._running[ticket] = self._start(region, launch, args)
        self.launches.append(launch)
        return ticket

    def _start(self, region: RegionDescriptor, launch: KernelLaunch, args) -> _Running:
        n = launch.agents
        barrier = GlobalBarrier(n, self.watchdog_s) if region.uses_barrier else None
        workers = n if region.uses_barrier else min(n, self.pool_width)
        run = _Running(launch, workers, barrier=barrier)
        self.pool.ensure(workers)
        K = launch.threads_per_team

        def agent(first: int) -> None:
            try:
                contexts = (AgentContext(self, region, launch, gid // K, gid % K, args, barrier)
                            for gid in range(first, n, workers))
                if inspect.isgeneratorfunction(region.body):
                    _interleave([region.body(ctx) for ctx in contexts], run)
                    return
                for ctx in contexts:
                    if run.fault is not None:
                        break
                    region.body(ctx)
            except BaseException as e:  # surfaced through the initial agent
                with run.lock:
                    if run.fault is None:
                        run.fault = e
                if barrier is not None:
                    barrier.abort(e)
            finally:
                with run.lock:
                    run.remaining -= 1
                    if run.remaining == 0:
                        run.done.set()

        for w in range(workers):
            self.pool.submit(lambda w=w: agent(w))
        return run

    # device side
    def encounter_parallel(self, region: RegionDescriptor | int, args=(), num_teams: int = 1,
                           threads_per_team: int = 1) -> KernelLaunch:
        if in_parallel_kernel():
            raise LaunchRejected("nested parallel regions are not supported")
        region = self.regions[region] if isinstance(region, int) else region
        if region.region_id not in self.regions:
            self.register(region)
        m = self.machine
        mark = m.stack.mark()
        try:
            req = CallRequest(KERNEL_LAUNCH_CALLEE)
            req.add_value(region.region_id)
            req.add_value(num_teams)
            req.add_value(threads_per_team)
            if args:
                words = [a.raw if isinstance(a, SimAddress) else int(a) & (2**64 - 1)
                         for a in args]
                block = m.stack.push(8 * len(words), tag="launch-args")
                m.device_memory.write_bytes(block, struct.pack(f"<{len(words)}Q", *words))
                req.add_ref(block, AccessMode.READ, 8 * len(words), 0)
            ticket = m.client.issue_call(req)
        finally:
            m.stack.release(mark)
        if ticket == E2BIG:
            raise LaunchRejected(
                f"{num_teams}x{threads_per_team} agents exceed the limit of {self.agent_limit}")
        if ticket < 0:
            raise LaunchRejected(f"host refused region {region.region_id} ({ticket})")
        run = self._running.pop(ticket)
        if not run.done.wait(self.watchdog_s):
            stuck = DeadlockError(f"region {region.region_id} did not finish in {self.watchdog_s}s")
            with run.lock:
                run.fault = run.fault or stuck
            if run.barrier is not None:
                run.barrier.abort(stuck)
            # agents parked in a barrier wake up now; a body spinning forever cannot be stopped
            run.done.wait(1.0)
        if run.fault is not None:
            raise RegionFault(region.region_id, run.fault) from run.fault
        return run.launch

    def run_main(self, program: Callable, *args) -> int:
        """Run ``program(ctx, *args)`` on the single initial agent.

        An int returned by the program is its exit status; anything else is 0.
        """
        result: dict = {}

        def initial():
            try:
                result["status"] = program(MainContext(self), *args)
            except BaseException as e:
                result["error"] = e

        t = threading.Thread(target=initial, name="initial-agent")
        t.start()
        t.join()
        if "error" in result:
            raise result["error"]
        status = result.get("status")
        return status if isinstance(status, int) else 0

    def shutdown(self) -> None:
        self.pool.shutdown()


@dataclass
class MainContext:
    runtime: MultiTeamRuntime

    @property
    def machine(self):
        return self.runtime.machine

    @property
    def memory(self):
        return self.runtime.machine.device_memory

    def parallel(self, region, args=(), num_teams: int = 1, threads_per_team: int = 1):
        return self.runtime.encounter_parallel(region, args, num_teams, threads_per_team)

    def allocate(self, size: int) -> SimAddress:
        return self.runtime.machine.allocator.allocate(size)

    def free(self, addr: SimAddress) -> None:
        self.runtime.machine.allocator.deallocate(addr)
