"""Blocking device-to-host calls over the shared mailbox.

The client (any device agent) fills a request, migrates the referenced
objects into the payload area and waits for the single host server. The
server translates each reference to its payload copy, runs the landing pad
and flags completion. Both sides stamp every stage with a monotonic clock.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from .errors import (
    DeadlockError, DispatchError, InternalInconsistency, RemoteFault,
)
from .memory import Memory, SimAddress, Translation
from .protocol import (
    DONE, EFAULT, EMPTY, ENOSYS, REQUESTED, AccessMode, ArgDescriptor, ArgKind, CallRequest,
    DispatchStatus, Mailbox, StageTimes,
)

clock = time.perf_counter_ns

# polling back-off: this many yielding spins, then sleeps doubling up to the cap
_SPINS = 200
_SLEEP_MIN = 1e-6
_SLEEP_CAP = 1e-3


def _backoff():
    spins = 0
    delay = _SLEEP_MIN
    while True:
        if spins < _SPINS:
            spins += 1
            time.sleep(0)
        else:
            time.sleep(delay)
            delay = min(delay * 2, _SLEEP_CAP)
        yield


# --- host side ----------------------------------------------------------------

class HostCall:
    """Arguments as a landing pad sees them: values, or payload addresses."""

    def __init__(self, memory: Memory, args: list[ArgDescriptor], translated: list):
        self.memory = memory
        self.descriptors = args
        self._args = translated

    def __len__(self) -> int:
        return len(self._args)

    def raw(self, i: int) -> int:
        a = self._args[i]
        return a.raw if isinstance(a, SimAddress) else a

    def ptr(self, i: int) -> SimAddress | None:
        a = self._args[i]
        return a if isinstance(a, SimAddress) else SimAddress.from_raw(a)

    def int(self, i: int, bits: int = 64) -> int:
        v = self.raw(i) & ((1 << bits) - 1)
        return v - (1 << bits) if v >> (bits - 1) else v

    def float(self, i: int) -> float:
        return struct.unpack("<d", struct.pack("<Q", self.raw(i)))[0]

    def cstring(self, i: int) -> bytes:
        return self.memory.read_cstring(self.ptr(i))


Handler = Callable[[HostCall], int]


@dataclass
class LandingPad:
    name: str
    callee_id: int
    handler: Handler
    param_effects: tuple = ()
    invocations: int = 0


class RPCServer:
    """The single host agent serving the mailbox."""

    def __init__(self, mailbox: Mailbox, memory: Memory, clock_fn=clock):
        self.mailbox = mailbox
        self.memory = memory
        self.clock = clock_fn
        self.pads: dict[int, LandingPad] = {}
        self.served = 0
        self.last_fault: BaseException | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    def register(self, pad: LandingPad, replace: bool = False) -> LandingPad:
        old = self.pads.get(pad.callee_id)
        if old is not None and old.name != pad.name and not replace:
            raise ValueError(f"callee id {pad.callee_id} already bound to {old.name}")
        self.pads[pad.callee_id] = pad
        return pad

    def serve_once(self) -> bool:
        mb = self.mailbox
        if mb.state.load() != REQUESTED:
            return False
        s0 = self.clock()
        req = mb.read_request()
        translated = []
        for a in req.args:
            if a.kind == ArgKind.REF:
                t = Translation(a.object_base, mb.payload_address(a.payload_offset), a.obj_size)
                translated.append(t.translate(a.addr))
            else:
                translated.append(a.raw)
        call = HostCall(self.memory, req.args, translated)
        pad = self.pads.get(req.callee)
        s1 = self.clock()
        if pad is None:
            ret, err = ENOSYS, DispatchStatus.UNKNOWN_CALLEE
        else:
            pad.invocations += 1
            try:
                ret, err = pad.handler(call), DispatchStatus.OK
            except Exception as e:  # the server never dies with a handler
                self.last_fault = e
                ret, err = EFAULT, DispatchStatus.HANDLER_FAULT
        s2 = self.clock()
        mb.write_result(ret or 0, err)
        s3 = self.clock()
        mb.write_stamps(s0, s1, s2, s3)
        self.served += 1
        mb.state.store(DONE)
        return True

    def _loop(self) -> None:
        while not self._stop.is_set():
            wait = _backoff()
            while not self._stop.is_set() and not self.serve_once():
                next(wait)

    def start(self) -> None:
        if self._thread is None:
            self._stop.clear()
            self._thread = threading.Thread(target=self._loop, name="rpc-server", daemon=True)
            self._thread.start()

    def stop(self) -> None:
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None

    @property
    def running(self) -> bool:
        return self._thread is not None


# --- device side --------------------------------------------------------------

@dataclass
class RPCClient:
    mailbox: Mailbox
    memory: Memory
    watchdog_s: float = 30.0
    clock: Callable[[], int] = clock
    trace: list[StageTimes] = field(default_factory=list)
    sink: object = None
    keep_trace: bool = True

    def __post_init__(self):
        self._lock = threading.Lock()

    def issue_call(self, request: CallRequest | Callable[[], CallRequest]) -> int:
        mb = self.mailbox
        deadline = time.monotonic() + self.watchdog_s
        if not self._lock.acquire(timeout=self.watchdog_s):
            raise DeadlockError("mailbox lock not acquired within the watchdog limit")
        try:
            t0 = self.clock()
            req = request() if callable(request) else request
            tb = self.clock()
            req.layout_payload(mb.payload_capacity)
            wait = _backoff()
            while mb.state.load() != EMPTY:
                self._check(deadline, "mailbox never drained")
                next(wait)
            mb.write_request(req)
            t1 = self.clock()
            mem = self.memory
            for a in req.args:
                if a.kind != ArgKind.REF:
                    continue
                dst = mb.payload_address(a.payload_offset)
                if a.mode.copies_in:
                    mem.copy(dst, a.object_base, a.obj_size)
                else:
                    mem.write_bytes(dst, bytes(a.obj_size))
            t2 = self.clock()
            mb.state.store(REQUESTED)
            wait = _backoff()
            while mb.state.load() != DONE:
                self._check(deadline, f"no reply for callee {req.callee}")
                next(wait)
            t3 = self.clock()
            ret, err = mb.read_result()
            if err == DispatchStatus.OK:
                for a in req.args:
                    if a.kind == ArgKind.REF and a.mode.copies_out:
                        mem.copy(a.object_base, mb.payload_address(a.payload_offset), a.obj_size)
            stamps = mb.read_stamps()
            mb.state.store(EMPTY)
            t4 = self.clock()
        finally:
            self._lock.release()
        self._record(req.callee, t0, tb, t1, t2, t3, t4, stamps)
        if err == DispatchStatus.UNKNOWN_CALLEE:
            raise DispatchError(f"host has no landing pad for callee {req.callee}")
        if err == DispatchStatus.HANDLER_FAULT:
            raise RemoteFault(f"landing pad for callee {req.callee} faulted")
        return ret

    def _check(self, deadline: float, what: str) -> None:
        if time.monotonic() > deadline:
            raise DeadlockError(f"{what} after {self.watchdog_s}s")

    def _record(self, callee, t0, tb, t1, t2, t3, t4, stamps) -> None:
        s0, s1, s2, s3 = stamps
        times = StageTimes(
            callee,
            {"init": t1 - tb, "identify": (tb - t0) + (t2 - t1), "wait": t3 - t2,
             "copyback": t4 - t3},
            {"copyin": s1 - s0, "invoke": s2 - s1, "copyout": s3 - s2,
             "gap": max(0, t3 - s3)},
        )
        if self.keep_trace:
            self.trace.append(times)
        if self.sink is not None:
            self.sink.write(times.to_json() + "\n")


# --- executing a lowering plan --------------------------------------------------

def build_request(plan, argvals, resolve_base, find_object, callee_id: int | None = None):
    """Turn a plan plus runtime argument values into a CallRequest.

    ``resolve_base(base)`` gives the runtime address of a named object (or
    None when it is not live); ``find_object(addr)`` is the allocator-backed
    lookup used for ``DynamicLookup`` arguments.
    """
    from .lowering import Dispatch, DynamicLookup, StaticRef

    req = CallRequest(plan.callee_id if callee_id is None else callee_id)
    for cls, v in zip(plan.args, argvals):
        if isinstance(cls, StaticRef):
            req.add_ref(v, cls.mode, cls.size, cls.offset)
        elif isinstance(cls, Dispatch):
            for cand in cls.candidates:
                base = resolve_base(cand.obj)
                if base is not None and v == base + cand.offset:
                    req.add_ref(v, cand.mode, cand.size, cand.offset)
                    break
            else:
                raise InternalInconsistency(
                    f"{plan.call_site}: {v!r} matches no dispatch candidate")
        elif isinstance(cls, DynamicLookup) and isinstance(v, SimAddress):
            hit = find_object(v)
            if hit is None:
                req.add_value(v)
            else:
                mode = AccessMode.READ if hit.record.constant else cls.mode
                req.add_ref(v, mode, hit.size, hit.offset)
        else:
            req.add_value(v)
    return req


def load_trace(lines) -> list[StageTimes]:
    return [StageTimes.from_json(ln) for ln in lines if ln.strip()]


def mean_stages(trace: list[StageTimes]) -> dict[str, dict[str, float]]:
    """Mean nanoseconds per stage for each side."""
    out: dict[str, dict[str, float]] = {"device": {}, "host": {}}
    if not trace:
        return out
    for side in out:
        keys = getattr(trace[0], side).keys()
        out[side] = {k: sum(getattr(t, side)[k] for t in trace) / len(trace) for k in keys}
    return out


__all__ = [
    "HostCall", "LandingPad", "RPCServer", "RPCClient", "build_request", "load_trace",
    "mean_stages",
]
